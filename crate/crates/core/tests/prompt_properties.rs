use pfedpt_core::numeric::Tensor;
use pfedpt_core::prompting::{
    apply_prompt, init_prompt, prompt_grad_step, prompt_param_count, PromptMode, PromptSpec, PromptTemplate,
};
use pfedpt_core::rng::stream;
use proptest::prelude::*;
use rand::Rng;

fn random_images(shape: [usize; 3], n: usize, seed: u64) -> Tensor<f32> {
    let mut r = stream(seed, "images", &[]);
    let len = n * shape.iter().product::<usize>();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn count_formula_matches_mask_for_every_small_shape() {
    for c in 1..=3 {
        for h in 1..=12 {
            for w in 1..=12 {
                for p in 0..=12 {
                    for t in PromptTemplate::ALL {
                        let Ok(spec) = PromptSpec::new(t, p, [c, h, w]) else {
                            continue;
                        };
                        let count = prompt_param_count(&spec).unwrap();
                        assert_eq!(count, c * spec.mask().popcount(), "{t} p={p} {c}x{h}x{w}");
                        assert_eq!(init_prompt::<f32>(&spec, 0).unwrap().param_count(), count);
                    }
                }
            }
        }
    }
}

#[test]
fn reference_padding_count() {
    let spec = PromptSpec::new(PromptTemplate::Padding, 4, [3, 32, 32]).unwrap();
    assert_eq!(prompt_param_count(&spec).unwrap(), 1344);
    assert!(PromptSpec::new(PromptTemplate::Padding, 16, [3, 32, 32]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prompt_only_touches_its_support(
        t in 0usize..3,
        p in 1usize..6,
        side in 12usize..20,
        seed in any::<u64>(),
        steps in 1usize..5,
        replace in any::<bool>(),
    ) {
        let shape = [3, side, side];
        let mode = if replace { PromptMode::Replace } else { PromptMode::Add };
        let spec = PromptSpec::new(PromptTemplate::ALL[t], p, shape).unwrap().with_mode(mode);
        let mut prompt = init_prompt::<f32>(&spec, 0).unwrap();
        let mut r = stream(seed, "steps", &[]);
        for _ in 0..steps {
            let g: Vec<f32> = (0..prompt.param_count()).map(|_| r.random_range(-3.0..3.0)).collect();
            prompt_grad_step(&mut prompt, &g, r.random_range(0.0..2.0)).unwrap();
        }
        // the dense view is zero off the mask after any update sequence
        let mask = spec.mask();
        let grid = prompt.delta_grid();
        for ch in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    if !mask.get(i, j) {
                        prop_assert_eq!(grid.data()[(ch * side + i) * side + j], 0.0);
                    }
                }
            }
        }
        // prompted images equal the raw images bit-for-bit off the placed support
        let x = random_images(shape, 2, seed);
        let (y, placement) = apply_prompt(&x, &prompt, &mut r).unwrap();
        let support: std::collections::HashSet<usize> =
            mask.positions().into_iter().map(|q| q + placement.shift).collect();
        for (k, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
            if !support.contains(&(k % (side * side))) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn prompting_a_blank_image_yields_the_dense_grid(p in 1usize..4, seed in any::<u64>()) {
        let spec = PromptSpec::new(PromptTemplate::Padding, p, [3, 10, 10]).unwrap();
        let mut prompt = init_prompt::<f64>(&spec, 1).unwrap();
        let mut r = stream(seed, "vals", &[]);
        let v: Vec<f64> = (0..prompt.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
        prompt.set_values(&v).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 3, 10, 10]);
        let (y, _) = apply_prompt(&x, &prompt, &mut r).unwrap();
        let grid = prompt.delta_grid();
        prop_assert_eq!(y.data(), grid.data());
    }
}

#[test]
fn interior_of_padded_images_is_untouched_at_reference_size() {
    let shape = [3, 32, 32];
    let spec = PromptSpec::new(PromptTemplate::Padding, 4, shape).unwrap();
    let mut prompt = init_prompt::<f32>(&spec, 0).unwrap();
    prompt.set_values(&vec![0.37; 1344]).unwrap();
    let x = random_images(shape, 3, 9);
    let (y, _) = apply_prompt(&x, &prompt, &mut stream(0, "unused", &[])).unwrap();
    for (k, (a, b)) in x.data().iter().zip(y.data()).enumerate() {
        let pix = k % 1024;
        let (i, j) = (pix / 32, pix % 32);
        if (4..28).contains(&i) && (4..28).contains(&j) {
            assert_eq!(a.to_bits(), b.to_bits());
        } else {
            assert_eq!(*b, *a + 0.37);
        }
    }
}

use pfedpt_core::nn::{build_model, Architecture, CnnWidths, ModelSpec};
use pfedpt_core::numeric::{finite_diff_grad, BackwardOptions, Network, Tensor};
use pfedpt_core::prompting::{PromptSpec, PromptTemplate};
use pfedpt_core::rng::stream;
use rand::Rng;

/// `max |a − f| / max(|a| + |f|, floor)` over all coordinates.
fn max_rel_err(a: &[f64], f: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(f)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn random_batch(shape: [usize; 3], n: usize, seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, "gradcheck-input", &[]);
    let len = n * shape.iter().product::<usize>();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize_biases(net: &mut Network<f64>, seed: u64) {
    // zero biases put every ReLU of a constant input exactly at its kink
    let mut r = stream(seed, "gradcheck-bias", &[]);
    let ranges: Vec<_> = net
        .layout()
        .entries()
        .iter()
        .filter(|e| e.name.ends_with(".bias"))
        .map(|e| e.range())
        .collect();
    for range in ranges {
        for v in &mut net.params_mut()[range] {
            *v = r.random_range(-0.1..0.1);
        }
    }
}

fn check(spec: &ModelSpec, seed: u64) -> f64 {
    let mut net = build_model::<f64>(spec, seed).unwrap();
    randomize_biases(&mut net, seed);
    let x = random_batch(spec.input_shape, 2, seed);
    let labels = [1, spec.num_classes - 1];
    net.forward_loss(&x, &labels, true).unwrap();
    let analytic = net.backward().unwrap();
    let numeric = finite_diff_grad(&mut net, &x, &labels, 1e-6).unwrap();
    max_rel_err(analytic.values(), numeric.values(), 1e-7)
}

fn small_cnn() -> ModelSpec {
    ModelSpec {
        architecture: Architecture::CnnPaper(CnnWidths {
            conv_channels: 12,
            kernel: 5,
            fc1: 48,
            fc2: 24,
        }),
        input_shape: [3, 24, 24],
        num_classes: 10,
    }
}

#[test]
fn cnn_backward_matches_finite_differences() {
    let spec = small_cnn();
    let net = build_model::<f64>(&spec, 0).unwrap();
    assert!(net.param_count() <= 60_000, "{} parameters", net.param_count());
    let err = check(&spec, 11);
    assert!(err <= 1e-4, "max relative error {err:e}");
}

#[test]
fn mlp_backward_matches_finite_differences() {
    for hidden in [0, 16] {
        let err = check(&ModelSpec::mlp_tiny([3, 6, 6], 5, hidden), 3);
        assert!(err <= 1e-5, "hidden {hidden}: max relative error {err:e}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let spec = small_cnn();
    let mut net = build_model::<f64>(&spec, 5).unwrap();
    randomize_biases(&mut net, 5);
    let x = random_batch(spec.input_shape, 2, 5);
    let labels = [3, 7];
    net.forward_loss(&x, &labels, true).unwrap();
    let out = net
        .backward_with(BackwardOptions {
            params: false,
            input: true,
        })
        .unwrap();
    assert!(out.grads.is_none());
    let dx = out.input.unwrap();
    // a sample of coordinates keeps the check fast
    let mut r = stream(5, "coords", &[]);
    let eps = 1e-6;
    for _ in 0..200 {
        let i = r.random_range(0..x.len());
        let mut up = x.clone();
        up.data_mut()[i] += eps;
        let mut down = x.clone();
        down.data_mut()[i] -= eps;
        let fd = (net.forward_loss(&up, &labels, false).unwrap().0 - net.forward_loss(&down, &labels, false).unwrap().0)
            / (2.0 * eps);
        let a = dx.data()[i];
        assert!((a - fd).abs() / (a.abs() + fd.abs()).max(1e-5) <= 1e-4, "coord {i}: {a} vs {fd}");
    }
}

#[test]
fn prompt_gradient_is_the_chain_rule_through_the_input() {
    let spec = ModelSpec::mlp_tiny([3, 10, 10], 4, 8);
    let mut net = build_model::<f64>(&spec, 2).unwrap();
    randomize_biases(&mut net, 2);
    let pspec = PromptSpec::new(PromptTemplate::Padding, 2, [3, 10, 10]).unwrap();
    let mut prompt = pfedpt_core::prompting::init_prompt::<f64>(&pspec, 0).unwrap();
    let mut r = stream(2, "prompt-values", &[]);
    let vals: Vec<f64> = (0..prompt.param_count()).map(|_| r.random_range(-0.5..0.5)).collect();
    prompt.set_values(&vals).unwrap();
    let x = random_batch([3, 10, 10], 3, 2);
    let labels = [0, 1, 3];
    let placement = Default::default();
    net.forward_loss(&prompt.apply_at(&x, placement).unwrap(), &labels, true).unwrap();
    let dx = net
        .backward_with(BackwardOptions {
            params: false,
            input: true,
        })
        .unwrap()
        .input
        .unwrap();
    let analytic = prompt.gradient(&dx, placement).unwrap();
    let numeric = pfedpt_core::numeric::central_difference(
        |v| {
            let mut p = prompt.clone();
            p.set_values(v).unwrap();
            net.forward_loss(&p.apply_at(&x, placement).unwrap(), &labels, false).unwrap().0
        },
        &vals,
        1e-6,
    );
    assert!(max_rel_err(&analytic, &numeric, 1e-7) <= 1e-5);
}

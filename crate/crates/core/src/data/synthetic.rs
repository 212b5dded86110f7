use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Images, Split};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Class `k` is a fixed seeded template `T_k` (pixels uniform in `[−1, 1]`)
/// plus isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub shape: [usize; 3],
    pub n_per_class: usize,
    /// Test samples per class; defaults to `n_per_class`.
    #[serde(default)]
    pub n_test_per_class: Option<usize>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn template<T: Scalar>(&self, class: usize) -> Vec<T> {
        let mut r = rng::stream(self.seed, "synthetic-template", &[class as u64]);
        (0..self.shape.iter().product::<usize>())
            .map(|_| T::from_f64_lossy(r.random_range(-1.0..=1.0)))
            .collect()
    }
}

fn draw<T: Scalar>(cfg: &SyntheticConfig, templates: &[Vec<T>], per_class: usize, domain: &str, split: Split) -> Result<Dataset<T>> {
    let mut r = rng::stream(cfg.seed, domain, &[]);
    let n = per_class * cfg.classes;
    let per = cfg.shape.iter().product::<usize>();
    let mut pixels = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % cfg.classes;
        labels.push(k);
        for &t in &templates[k] {
            let z: f64 = r.sample(StandardNormal);
            pixels.push(t + T::from_f64_lossy(cfg.noise_sigma * z));
        }
    }
    Dataset::new(Images::Normalized(pixels), labels, cfg.shape, cfg.classes, split)
}

/// Train and test sets drawn from disjoint sub-streams of the same
/// generator; sample `i` has label `i mod classes`.
pub fn make_synthetic<T: Scalar>(cfg: &SyntheticConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least 2 classes".into()));
    }
    if cfg.n_per_class == 0 || cfg.shape.contains(&0) {
        return Err(Error::InvalidArgument("synthetic shape and n_per_class must be positive".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument("noise_sigma must be finite and non-negative".into()));
    }
    let templates: Vec<Vec<T>> = (0..cfg.classes).map(|k| cfg.template(k)).collect();
    let n_test = cfg.n_test_per_class.unwrap_or(cfg.n_per_class);
    if n_test == 0 {
        return Err(Error::InvalidArgument("n_test_per_class must be positive".into()));
    }
    Ok((
        draw(cfg, &templates, cfg.n_per_class, "synthetic-train", Split::Train)?,
        draw(cfg, &templates, n_test, "synthetic-test", Split::Test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(sigma: f64) -> SyntheticConfig {
        SyntheticConfig {
            classes: 4,
            shape: [1, 4, 4],
            n_per_class: 5,
            n_test_per_class: Some(3),
            noise_sigma: sigma,
            seed: 11,
        }
    }

    #[test]
    fn zero_noise_reproduces_templates() {
        let c = cfg(0.0);
        let (train, test) = make_synthetic::<f32>(&c).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 12);
        for (i, &y) in train.labels.iter().enumerate() {
            let x = train.batch(&[i]).unwrap();
            assert_eq!(x.data(), c.template::<f32>(y).as_slice());
        }
    }

    #[test]
    fn same_seed_same_data_and_disjoint_streams() {
        let (a, ta) = make_synthetic::<f32>(&cfg(0.5)).unwrap();
        let (b, _) = make_synthetic::<f32>(&cfg(0.5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.batch(&[0]).unwrap(), ta.batch(&[0]).unwrap());
    }

    #[test]
    fn nearest_template_is_perfect_without_noise() {
        let c = cfg(0.0);
        let (_, test) = make_synthetic::<f64>(&c).unwrap();
        let templates: Vec<Vec<f64>> = (0..c.classes).map(|k| c.template(k)).collect();
        let mut correct = 0;
        for (i, &y) in test.labels.iter().enumerate() {
            let x = test.batch(&[i]).unwrap();
            let best = (0..c.classes)
                .min_by(|&a, &b| {
                    let da: f64 = x.data().iter().zip(&templates[a]).map(|(p, t)| (p - t).powi(2)).sum();
                    let db: f64 = x.data().iter().zip(&templates[b]).map(|(p, t)| (p - t).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += usize::from(best == y);
        }
        assert_eq!(correct, test.len());
    }
}

use super::network::Network;
use super::params::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(p+ε) - f(p-ε)) / 2ε` of a scalar function.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut p = point.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Finite-difference estimate of the loss gradient for every parameter.
/// Uses only forward passes, so it stays independent of `backward`.
pub fn finite_diff_grad(net: &mut Network<f64>, x: &Tensor<f64>, labels: &[usize], eps: f64) -> Result<Gradients<f64>> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("epsilon {eps} outside (0, 1e-2]")));
    }
    let n = net.param_count();
    let mut grads = vec![0.0; n];
    for (i, g) in grads.iter_mut().enumerate() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + eps;
        let (up, _) = net.forward_loss(x, labels, false)?;
        net.params_mut()[i] = orig - eps;
        let (down, _) = net.forward_loss(x, labels, false)?;
        net.params_mut()[i] = orig;
        *g = (up - down) / (2.0 * eps);
    }
    Gradients::new(net.layout().clone(), grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let g = central_difference(|p| p[0] * p[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_estimate() {
        let g = central_difference(|_| 4.2, &[1.0, -2.0, 0.5], 1e-3);
        assert!(g.iter().all(|&v| v == 0.0));
    }
}

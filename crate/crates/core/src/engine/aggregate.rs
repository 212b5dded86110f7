use crate::error::{Error, Result};
use crate::numeric::ParameterVector;
use crate::scalar::Scalar;

/// Weighted elementwise average with weights renormalized to sum to 1.
///
/// Computed as `m₀ + Σ wₖ (mₖ − m₀)`, which returns identical inputs
/// unchanged bit-for-bit.
pub fn aggregate_slices<T: Scalar>(models: &[&[T]], weights: &[f64]) -> Result<Vec<T>> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    };
    if models.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} models with {} weights",
            models.len(),
            weights.len()
        )));
    }
    if let Some(m) = models.iter().find(|m| m.len() != first.len()) {
        return Err(Error::ParamMismatch(format!(
            "models of length {} and {}",
            first.len(),
            m.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("all aggregation weights are zero".into()));
    }
    let mut out = first.to_vec();
    for (m, &w) in models.iter().zip(weights).skip(1) {
        let w = T::from_f64_lossy(w / total);
        for ((o, &v), &v0) in out.iter_mut().zip(m.iter()).zip(first.iter()) {
            *o += w * (v - v0);
        }
    }
    Ok(out)
}

pub fn aggregate<T: Scalar>(models: &[ParameterVector<T>], weights: &[f64]) -> Result<ParameterVector<T>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to aggregate".into()))?;
    if models.iter().any(|m| m.layout() != first.layout()) {
        return Err(Error::ParamMismatch("models have different layouts".into()));
    }
    let slices: Vec<&[T]> = models.iter().map(|m| m.values()).collect();
    ParameterVector::new(first.layout().clone(), aggregate_slices(&slices, weights)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_weighted_case() {
        let out = aggregate_slices(&[&[4.0f32][..], &[8.0][..]], &[0.75, 0.25]).unwrap();
        assert_eq!(out, vec![5.0]);
        // unnormalized weights are renormalized
        let out = aggregate_slices(&[&[4.0f64][..], &[8.0][..]], &[3.0, 1.0]).unwrap();
        assert_eq!(out, vec![5.0]);
    }

    #[test]
    fn identical_models_are_returned_exactly() {
        let m = [0.1f32, -3.7, 1e-8, 12345.678];
        let out = aggregate_slices(&[&m[..], &m[..], &m[..]], &[0.3, 0.3, 0.4]).unwrap();
        assert_eq!(out, m.to_vec());
    }

    #[test]
    fn errors() {
        assert!(aggregate_slices::<f32>(&[], &[]).is_err());
        assert!(aggregate_slices(&[&[1.0f32][..], &[1.0, 2.0][..]], &[1.0, 1.0]).is_err());
        assert!(aggregate_slices(&[&[1.0f32][..]], &[0.0]).is_err());
        assert!(aggregate_slices(&[&[1.0f32][..]], &[1.0, 2.0]).is_err());
        assert!(aggregate_slices(&[&[1.0f32][..], &[2.0][..]], &[-1.0, 2.0]).is_err());
    }
}

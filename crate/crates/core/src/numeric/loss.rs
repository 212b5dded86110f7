use crate::scalar::Scalar;

/// Mean softmax cross-entropy over a batch of logits `[batch, classes]`.
/// Returns the loss and `d loss / d logits`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (T, Vec<T>) {
    let batch = labels.len();
    debug_assert_eq!(logits.len(), batch * classes);
    let inv_b = T::one() / T::from_usize(batch.max(1)).unwrap();
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for ((row, g), &y) in logits.chunks(classes).zip(grad.chunks_mut(classes)).zip(labels) {
        let top = (0..classes).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        let max = row[top];
        // the top term is exactly 1; summing the rest separately keeps
        // ln(1 + rest) accurate for confident predictions
        let mut rest = T::zero();
        for (i, (gi, &z)) in g.iter_mut().zip(row).enumerate() {
            let e = (z - max).exp();
            *gi = e;
            if i != top {
                rest += e;
            }
        }
        let denom = T::one() + rest;
        total += (max - row[y]) + rest.ln_1p();
        for gi in g.iter_mut() {
            *gi = *gi / denom * inv_b;
        }
        g[y] -= inv_b;
    }
    (total * inv_b, grad)
}

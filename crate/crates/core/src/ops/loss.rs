use super::Scalar;

/// Weighted softmax cross-entropy: `Σ_i w_i · CE(logits_i, y_i)`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
    weights: &[T],
) -> (T, Vec<T>) {
    assert_eq!(logits.len(), classes * labels.len());
    assert_eq!(weights.len(), labels.len());
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = T::zero();
    for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss = loss + w * (lse - row[label]);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = w * (v - lse).exp();
        }
        g[label] = g[label] - w;
    }
    (loss, grad)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the largest logit in each row.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

//! Softmax cross-entropy over a batch of logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            axis: "rank",
            detail: format!("expected [N,K] logits, got {s:?}"),
        });
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            axis: "batch",
            detail: format!("{} labels for {} rows", labels.len(), n),
        });
    }
    for (row, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: k,
                row,
            });
        }
    }
    Ok((n, k))
}

/// Mean cross-entropy over the batch, computed with the log-sum-exp shift.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = check_labels(logits, labels)?;
    let mut total = 0.0;
    for row in 0..n {
        let z = &logits.data()[row * k..(row + 1) * k];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[labels[row]];
    }
    Ok(Tensor::scalar(total / n as f64))
}

/// d(mean CE)/d(logits) scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward(
    logits: &Tensor,
    labels: &[usize],
    upstream: f64,
) -> Result<Tensor> {
    let (n, k) = check_labels(logits, labels)?;
    let mut grad = Tensor::zeros(logits.shape());
    let scale = upstream / n as f64;
    for row in 0..n {
        let z = &logits.data()[row * k..(row + 1) * k];
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|&v| (v - m).exp()).sum();
        let g = &mut grad.data_mut()[row * k..(row + 1) * k];
        for (i, (&zv, gv)) in z.iter().zip(g.iter_mut()).enumerate() {
            let p = (zv - m).exp() / denom;
            *gv = scale * (p - if i == labels[row] { 1.0 } else { 0.0 });
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        let logits = Tensor::filled(&[3, 4], 0.7);
        let loss = softmax_cross_entropy(&logits, &[0, 1, 3]).unwrap();
        assert!((loss.scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn growing_margin_drives_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let mut logits = Tensor::zeros(&[1, 3]);
            logits.data_mut()[1] = margin;
            let loss = softmax_cross_entropy(&logits, &[1]).unwrap().scalar_value();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let logits = Tensor::from_vec(
            &[4, 3],
            (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let labels = [2, 0, 1, 1];
        let got = softmax_cross_entropy(&logits, &labels).unwrap().scalar_value();
        // Direct formula without the log-sum-exp shift.
        let mut want = 0.0;
        for row in 0..4 {
            let z = &logits.data()[row * 3..(row + 1) * 3];
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            want += -(z[labels[row]].exp() / denom).ln();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }
}

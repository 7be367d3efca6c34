use ndarray::{Array2, ArrayView2};

use crate::error::{PvadError, Result};

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// Weighted sum of per-frame `-log p(label)`.
    pub loss: f64,
    pub posteriors: Array2<f64>,
    /// `dloss/dlogits`.
    pub grad: Array2<f64>,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Mean cross-entropy over frames; gradient is `(posterior - onehot) / T`.
pub fn softmax_ce(logits: ArrayView2<f64>, labels: &[usize]) -> Result<CrossEntropy> {
    let n = logits.nrows().max(1) as f64;
    softmax_ce_weighted(logits, labels, 1.0 / n)
}

/// Cross-entropy with every frame weighted by `weight`. A minibatch mean over
/// all frames uses `weight = 1 / total_frames` for each member.
pub fn softmax_ce_weighted(
    logits: ArrayView2<f64>,
    labels: &[usize],
    weight: f64,
) -> Result<CrossEntropy> {
    let classes = logits.ncols();
    if labels.len() != logits.nrows() {
        return Err(PvadError::Shape {
            path: "softmax_ce labels".into(),
            expected: vec![logits.nrows()],
            got: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(PvadError::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut loss = 0.0;
    let mut posteriors = Array2::zeros(logits.raw_dim());
    for ((row, mut post), &label) in logits.rows().into_iter().zip(posteriors.rows_mut()).zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (p, v) in post.iter_mut().zip(row.iter()) {
            *p = (v - m - lse).exp();
        }
        loss -= row[label] - m - lse;
    }
    let mut grad = posteriors.clone();
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        row[label] -= 1.0;
    }
    grad *= weight;
    Ok(CrossEntropy {
        loss: loss * weight,
        posteriors,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits() {
        let ce = softmax_ce(array![[0.0, 0.0]].view(), &[0]).unwrap();
        assert_eq!(ce.posteriors, array![[0.5, 0.5]]);
        assert!((ce.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn rejects_out_of_range_label() {
        assert!(softmax_ce(array![[0.0, 1.0]].view(), &[2]).is_err());
    }

    #[test]
    fn stable_for_huge_logits() {
        let ce = softmax_ce(array![[1e4, -1e4], [-800.0, 800.0]].view(), &[0, 0]).unwrap();
        assert!(ce.loss.is_finite());
        for row in ce.posteriors.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = array![[0.3, -1.2], [2.0, 0.5], [-0.4, -0.1]];
        let labels = [1, 0, 1];
        let ce = softmax_ce(logits.view(), &labels).unwrap();
        let h = 1e-6;
        for t in 0..3 {
            for c in 0..2 {
                let mut plus = logits.clone();
                plus[[t, c]] += h;
                let mut minus = logits.clone();
                minus[[t, c]] -= h;
                let fd = (softmax_ce(plus.view(), &labels).unwrap().loss
                    - softmax_ce(minus.view(), &labels).unwrap().loss)
                    / (2.0 * h);
                assert!((fd - ce.grad[[t, c]]).abs() < 1e-9, "{t} {c}");
            }
        }
        // closed form (p - onehot) / T
        assert!((ce.grad[[0, 1]] - (ce.posteriors[[0, 1]] - 1.0) / 3.0).abs() < 1e-15);
    }
}

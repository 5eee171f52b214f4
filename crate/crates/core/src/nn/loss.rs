use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Mean softmax cross-entropy over rows and its gradient
/// `(softmax - onehot) / rows`.
pub fn cross_entropy<S: Scalar>(logits: &Matrix<S>, labels: &[usize]) -> Result<(S, Matrix<S>)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::arg("cross entropy of zero rows"));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::arg(format!("label {bad} outside [0, {c})")));
    }
    let inv_rows = S::one() / S::lit(logits.rows() as f64);
    let mut grad = Matrix::zeros(logits.rows(), c);
    let mut loss = S::zero();
    for (i, (row, &label)) in logits.iter_rows().zip(labels).enumerate() {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let g = grad.row_mut(i);
        let mut sum = S::zero();
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp();
            sum += *gj;
        }
        loss += sum.ln() - (row[label] - max);
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_rows;
        }
        g[label] -= inv_rows;
    }
    Ok((loss * inv_rows, grad))
}

/// Index of the largest entry per row; ties go to the smaller index.
pub fn argmax_rows<S: Scalar>(logits: &Matrix<S>) -> Vec<usize> {
    logits
        .iter_rows()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, uniform};

    #[test]
    fn uniform_logits_give_log_c() {
        for c in [2usize, 3, 7] {
            let logits = Matrix::<f64>::zeros(4, c);
            let (loss, _) = cross_entropy(&logits, &[0, 1, 0, 1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn confident_correct_class_gives_zero() {
        let logits = Matrix::from_rows(&[vec![1e9, 0.0, 0.0]]).unwrap();
        let (loss, grad): (f64, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.max_abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded(5);
        let data: Vec<f64> = (0..15).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
        let logits = Matrix::from_vec(5, 3, data).unwrap();
        let labels = [0, 2, 1, 1, 0];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..15 {
            let mut p = logits.clone();
            p.as_mut_slice()[idx] += h;
            let mut m = logits.clone();
            m.as_mut_slice()[idx] -= h;
            let fd = (cross_entropy(&p, &labels).unwrap().0 - cross_entropy(&m, &labels).unwrap().0) / (2.0 * h);
            let g = grad.as_slice()[idx];
            assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "{idx}: {fd} vs {g}");
        }
    }

    #[test]
    fn invalid_label_is_rejected() {
        let logits = Matrix::<f64>::zeros(1, 2);
        assert!(cross_entropy(&logits, &[2]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn argmax_ties_pick_first() {
        let logits = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }
}

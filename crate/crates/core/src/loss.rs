//! Distillation loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DISTRIBUTION_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct KlDivLoss {
    /// Mean over rows of `KL(teacher || student)`.
    pub value: f32,
    /// Gradient with respect to the student log-probabilities.
    pub grad_log_pd: Tensor,
    /// Gradient with respect to the logits that produced the student
    /// log-probabilities through log-softmax.
    pub grad_logits: Tensor,
}

/// `KL(teacher || student)` averaged over the batch.
///
/// The student is given in log space (the output of log-softmax), the
/// teacher as probabilities. Teacher entries equal to zero contribute
/// nothing (`0 ln 0 = 0`).
pub fn kl_div_loss(student_log_pd: &Tensor, teacher_pd: &Tensor) -> Result<KlDivLoss> {
    if student_log_pd.shape() != teacher_pd.shape() || student_log_pd.shape().len() != 2 {
        return Err(Error::shape(
            "kl-div",
            teacher_pd.shape(),
            student_log_pd.shape(),
        ));
    }
    validate_distributions(teacher_pd)?;
    let n = teacher_pd.row_len();
    let batch = teacher_pd.batch_size();
    let inv_batch = 1.0 / batch as f32;
    let mut total = 0.0f64;
    let mut grad_log = Vec::with_capacity(teacher_pd.len());
    let mut grad_logits = Vec::with_capacity(teacher_pd.len());
    for (row, (s, t)) in student_log_pd
        .data()
        .chunks_exact(n)
        .zip(teacher_pd.data().chunks_exact(n))
        .enumerate()
    {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDistribution {
                row,
                reason: "student log-probabilities are not finite".into(),
            });
        }
        for (&lq, &p) in s.iter().zip(t) {
            if p > 0.0 {
                total += p as f64 * ((p as f64).ln() - lq as f64);
            }
            grad_log.push(-p * inv_batch);
            grad_logits.push((lq.exp() - p) * inv_batch);
        }
    }
    let shape = teacher_pd.shape().to_vec();
    Ok(KlDivLoss {
        value: (total / batch as f64).max(0.0) as f32,
        grad_log_pd: Tensor::new(shape.clone(), grad_log)?,
        grad_logits: Tensor::new(shape, grad_logits)?,
    })
}

/// Checks that every row is finite, non-negative and sums to one.
pub fn validate_distributions(pd: &Tensor) -> Result<()> {
    for (row, r) in pd.rows().enumerate() {
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidDistribution {
                row,
                reason: "entries must be finite and non-negative".into(),
            });
        }
        let sum: f64 = r.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
            return Err(Error::InvalidDistribution {
                row,
                reason: format!("row sums to {sum}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::log_softmax_in_place;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identical_distributions_have_zero_loss() {
        let mut logits = vec![0.3, -1.2, 2.0, 0.1];
        log_softmax_in_place(&mut logits);
        let teacher: Vec<f32> = logits.iter().map(|v| v.exp()).collect();
        let sum: f32 = teacher.iter().sum();
        let teacher: Vec<f32> = teacher.iter().map(|v| v / sum).collect();
        let loss = kl_div_loss(&t(&[1, 4], &logits), &t(&[1, 4], &teacher)).unwrap();
        assert!(loss.value.abs() < 1e-6);
    }

    #[test]
    fn one_hot_against_uniform_is_ln2() {
        let half = 0.5f32.ln();
        let loss = kl_div_loss(&t(&[1, 2], &[half, half]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((loss.value - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_teacher_rows() {
        let s = t(&[1, 2], &[-0.7, -0.7]);
        assert!(matches!(
            kl_div_loss(&s, &t(&[1, 2], &[0.6, 0.6])),
            Err(Error::InvalidDistribution { row: 0, .. })
        ));
        assert!(kl_div_loss(&s, &t(&[1, 2], &[f32::NAN, 1.0])).is_err());
        assert!(kl_div_loss(&t(&[1, 2], &[f32::NEG_INFINITY, 0.0]), &t(&[1, 2], &[0.5, 0.5])).is_err());
    }
}

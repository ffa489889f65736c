//! Loss functions: label-smoothed cross-entropy and the robust mixture
//! negative log-likelihood that tolerates corrupted training pairs.

use crate::scalar::Scalar;
use crate::tape::robust_mix_value;
use crate::tensor::{log_softmax_row_f64, Tensor};

use super::TrainError;

/// Loss value with per-token diagnostics.
#[derive(Clone, Debug)]
pub struct LossOutput {
    /// Scalar loss, summed over tokens of the sequence.
    pub loss: f64,
    /// log p(y_i | x, y_(1..i-1)) at the true targets.
    pub token_log_probs: Vec<f64>,
    /// Posterior probability that the pair is clean; robust loss only.
    pub responsibility: Option<f64>,
}

fn true_token_log_probs<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
) -> Result<Vec<f64>, TrainError> {
    if logits.rows() != targets.len() {
        return Err(TrainError::MisalignedLoss {
            rows: logits.rows(),
            targets: targets.len(),
        });
    }
    let k = logits.cols();
    let mut out = Vec::with_capacity(targets.len());
    for (i, &y) in targets.iter().enumerate() {
        if y as usize >= k {
            return Err(TrainError::TargetOutOfRange { id: y, k });
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64()).collect();
        out.push(log_softmax_row_f64(&row)[y as usize]);
    }
    Ok(out)
}

/// Label-smoothed cross-entropy summed over tokens:
/// -sum_i sum_k q'(k) log softmax(z_i)_k with
/// q'(k) = (1-eps) [k == y_i] + eps/K.
pub fn smoothed_ce_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    epsilon: f64,
) -> Result<LossOutput, TrainError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(TrainError::BadHyper(format!(
            "label smoothing {epsilon} outside [0,1]"
        )));
    }
    let token_log_probs = true_token_log_probs(logits, targets)?;
    let k = logits.cols() as f64;
    let mut loss = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.to_f64()).collect();
        let log_probs = log_softmax_row_f64(&row);
        let sum_log: f64 = log_probs.iter().sum();
        loss -= (1.0 - epsilon) * log_probs[y as usize] + (epsilon / k) * sum_log;
    }
    Ok(LossOutput {
        loss,
        token_log_probs,
        responsibility: None,
    })
}

/// Robust mixture negative log-likelihood at the sequence level:
/// loss = -log((1-alpha) exp(l_model) + alpha exp(lm_log_prob)) with
/// l_model the unsmoothed sequence log-likelihood. The responsibility
/// w = (1-alpha) exp(l_model) / mixture is the posterior that the pair is
/// clean; the gradient with respect to the logits is w times the plain
/// cross-entropy gradient.
pub fn robust_nll<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    lm_log_prob: f64,
    alpha: f64,
) -> Result<LossOutput, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::BadHyper(format!("alpha {alpha} outside [0,1]")));
    }
    if alpha == 1.0 && lm_log_prob == f64::NEG_INFINITY {
        return Err(TrainError::DegenerateLikelihood);
    }
    let token_log_probs = true_token_log_probs(logits, targets)?;
    let l_model: f64 = token_log_probs.iter().sum();
    let (loss, w) = robust_mix_value(l_model, lm_log_prob, alpha);
    Ok(LossOutput {
        loss,
        token_log_probs,
        responsibility: Some(w),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_2(rows: &[[f64; 2]]) -> Tensor<f64> {
        Tensor::from_vec(&[rows.len(), 2], rows.iter().flatten().copied().collect())
    }

    #[test]
    fn uniform_logits_cost_ln_k_for_any_epsilon() {
        let z = logits_2(&[[0.0, 0.0]]);
        for eps in [0.0, 0.1, 0.5, 1.0] {
            let out = smoothed_ce_loss(&z, &[0], eps).unwrap();
            assert!((out.loss - 2.0f64.ln()).abs() < 1e-12, "eps {eps}");
        }
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let z = logits_2(&[[1.2, -0.4], [0.3, 0.9]]);
        let targets = [0u32, 1];
        let out = smoothed_ce_loss(&z, &targets, 0.0).unwrap();
        // Independent CE computation.
        let expect: f64 = -(out.token_log_probs[0] + out.token_log_probs[1]);
        assert!((out.loss - expect).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_hand_example() {
        // K = 2, logits (ln 3, 0) -> p = (0.75, 0.25); target 0, eps = 0.1:
        // loss = -(0.95 ln 0.75 + 0.05 ln 0.25).
        let z = logits_2(&[[3.0f64.ln(), 0.0]]);
        let out = smoothed_ce_loss(&z, &[0], 0.1).unwrap();
        let expect = -(0.95 * 0.75f64.ln() + 0.05 * 0.25f64.ln());
        assert!((out.loss - expect).abs() < 1e-12);
        assert!((out.loss - 0.342_612_686_885_186_3).abs() < 1e-9);
    }

    #[test]
    fn smoothed_ce_respects_gibbs_bound() {
        // Loss >= entropy of q', equality iff softmax equals q'.
        let eps = 0.2;
        let q0 = 1.0 - eps + eps / 2.0;
        let q1 = eps / 2.0;
        let entropy = -(q0 * q0.ln() + q1 * q1.ln());
        let matched = logits_2(&[[(q0 / q1).ln(), 0.0]]);
        let out = smoothed_ce_loss(&matched, &[0], eps).unwrap();
        assert!((out.loss - entropy).abs() < 1e-9);
        let off = logits_2(&[[0.3, 0.1]]);
        assert!(smoothed_ce_loss(&off, &[0], eps).unwrap().loss > entropy);
    }

    #[test]
    fn robust_alpha_zero_recovers_plain_nll() {
        let z = logits_2(&[[0.4, -0.2], [-1.0, 0.6]]);
        let targets = [1u32, 0];
        let robust = robust_nll(&z, &targets, -3.0, 0.0).unwrap();
        let plain = smoothed_ce_loss(&z, &targets, 0.0).unwrap();
        assert!((robust.loss - plain.loss).abs() < 1e-12);
        assert_eq!(robust.responsibility, Some(1.0));
    }

    #[test]
    fn robust_alpha_one_is_language_model_nll() {
        let z = logits_2(&[[0.4, -0.2]]);
        let out = robust_nll(&z, &[0], -2.5, 1.0).unwrap();
        assert!((out.loss - 2.5).abs() < 1e-12);
        assert_eq!(out.responsibility, Some(0.0));
    }

    #[test]
    fn robust_hand_example() {
        // l_model = ln 0.25, lm = ln 0.1, alpha = 0.25:
        // mixture = 0.75*0.25 + 0.25*0.1 = 0.2125,
        // loss = -ln 0.2125, w = 0.1875/0.2125.
        let z = logits_2(&[[0.25f64.ln(), (1.0f64 - 0.25).ln()]]);
        let out = robust_nll(&z, &[0], 0.1f64.ln(), 0.25).unwrap();
        let expect_loss = -(0.2125f64).ln();
        let expect_w = 0.1875 / 0.2125;
        assert!((out.loss - expect_loss).abs() < 1e-12);
        assert!((out.responsibility.unwrap() - expect_w).abs() < 1e-12);
        assert!((out.loss - 1.548_813_290_617_665_5).abs() < 1e-9);
        assert!((out.responsibility.unwrap() - 0.882_352_941_176_470_6).abs() < 1e-9);
    }

    #[test]
    fn robust_loss_bounded_by_components() {
        let z = logits_2(&[[0.7, -0.1], [0.2, 0.2]]);
        let targets = [0u32, 1];
        for alpha in [0.1, 0.25, 0.5, 0.9] {
            let lm = -4.0;
            let out = robust_nll(&z, &targets, lm, alpha).unwrap();
            let l_model: f64 = out.token_log_probs.iter().sum();
            assert!(out.loss <= -l_model - (1.0 - alpha).ln() + 1e-12);
            assert!(out.loss <= -lm - alpha.ln() + 1e-12);
        }
    }

    #[test]
    fn degenerate_mixture_is_an_error() {
        let z = logits_2(&[[0.0, 0.0]]);
        assert!(matches!(
            robust_nll(&z, &[0], f64::NEG_INFINITY, 1.0),
            Err(TrainError::DegenerateLikelihood)
        ));
    }

    #[test]
    fn misaligned_targets_are_an_error() {
        let z = logits_2(&[[0.0, 0.0]]);
        assert!(matches!(
            smoothed_ce_loss(&z, &[0, 1], 0.1),
            Err(TrainError::MisalignedLoss { .. })
        ));
    }
}

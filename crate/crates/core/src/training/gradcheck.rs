//! Gradient checking: the whole graph re-run in f64 against central finite
//! differences on randomly sampled parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::forward_internals::{build_decoder, build_encoder};
use crate::model::{init_params, Layout, ModelConfig};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

use super::{LossKind, TrainError};

const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Parameters whose relative error exceeded the tolerance.
    pub failures: Vec<String>,
}

/// The micro model the checker runs: d_model 8, one layer each side.
pub fn micro_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ffn: 16,
        max_seq_len: 12,
        dropout_rate: 0.0,
        vocab_size,
    }
}

fn loss_value(
    cfg: &ModelConfig,
    layout: &Layout,
    tensors: &[Tensor<f64>],
    x: &[u32],
    dec_in: &[u32],
    targets: &[u32],
    loss: LossKind,
    alpha: f64,
    lm_log_prob: f64,
) -> (Tape<f64>, NodeId, Vec<NodeId>) {
    let mut tape: Tape<f64> = Tape::new();
    let leaves: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let enc = build_encoder(&mut tape, cfg, layout, &leaves, x, 0.0, &mut None);
    let logits = build_decoder(&mut tape, cfg, layout, &leaves, enc, dec_in, 0.0, &mut None);
    let root = match loss {
        LossKind::SmoothedCe => tape.smoothed_ce(logits, targets, 0.1),
        LossKind::Robust => {
            let l = tape.seq_log_lik(logits, targets);
            tape.robust_mix(l, lm_log_prob, alpha)
        }
    };
    (tape, root, leaves)
}

/// Compares analytic gradients of the requested loss against central finite
/// differences (h = 1e-5, all-f64 graph, dropout off) on at least `samples`
/// randomly chosen parameters. Entries whose relative error exceeds
/// `tolerance` are listed by name in the report.
pub fn grad_check(
    config: &ModelConfig,
    loss: LossKind,
    tolerance: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let mut cfg = config.clone();
    cfg.dropout_rate = 0.0;
    cfg.validate().map_err(TrainError::Model)?;
    let layout = Layout::new(&cfg);
    let base = init_params(&cfg, seed)?;
    let tensors: Vec<Tensor<f64>> = base
        .tensors
        .iter()
        .map(|t| t.map(|v| v as f64))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let k = cfg.vocab_size as u32;
    let x: Vec<u32> = (0..6).map(|_| rng.random_range(0..k)).collect();
    let targets: Vec<u32> = (0..7).map(|_| rng.random_range(0..k)).collect();
    let mut dec_in = vec![crate::text::Vocab::BOS];
    dec_in.extend_from_slice(&targets[..targets.len() - 1]);
    let alpha = 0.25;
    let lm_log_prob = -8.0;

    let (tape, root, leaves) = loss_value(
        &cfg, &layout, &tensors, &x, &dec_in, &targets, loss, alpha, lm_log_prob,
    );
    let grads = tape.backward(root);

    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let (tape, root, _) = loss_value(
            &cfg, &layout, tensors, &x, &dec_in, &targets, loss, alpha, lm_log_prob,
        );
        tape.value(root).item()
    };

    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        failures: Vec::new(),
    };
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut tensor_idx = 0;
        while flat >= tensors[tensor_idx].len() {
            flat -= tensors[tensor_idx].len();
            tensor_idx += 1;
        }
        let name = format!("{}[{}]", layout.name(tensor_idx), flat);

        let analytic = grads[leaves[tensor_idx].index()]
            .as_ref()
            .map(|g| g.data()[flat])
            .unwrap_or(0.0);

        let mut plus = tensors.clone();
        plus[tensor_idx].data_mut()[flat] += FD_STEP;
        let mut minus = tensors.clone();
        minus[tensor_idx].data_mut()[flat] -= FD_STEP;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);

        // Central differences carry ~1e-10 cancellation noise at this loss
        // scale; below that, treat analytic and numeric as equal. (Some
        // parameters, like attention key biases, have exactly zero gradient:
        // they shift every score in a softmax row by the same constant.)
        let rel_err = if (analytic - fd).abs() < 1e-8 {
            0.0
        } else {
            (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12)
        };
        report.checked += 1;
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst_param = name.clone();
        }
        if rel_err > tolerance {
            report.failures.push(name);
        }
    }
    Ok(report)
}

//! Training loop: mini-batch AdamW over either loss, validation-based model
//! selection on median normalized edit distance, and gradient checking.

mod gradcheck;
mod loss;
mod optim;

pub use gradcheck::{grad_check, micro_config, GradCheckReport};
pub use loss::{robust_nll, smoothed_ce_loss, LossOutput};
pub use optim::{adamw_step, AdamHyper, AdamState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::mix;
use crate::decoding::greedy_decode;
use crate::metrics::{normalized_ed, summarize};
use crate::model::forward_internals::{build_decoder, build_encoder, leaves_from};
use crate::model::{
    encoder_input, init_params, teacher_sequences, Layout, ModelConfig, ModelParams,
};
use crate::ngram::NGramModel;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::text::{TextPair, TokenSeq, Vocab};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Ngram(#[from] crate::ngram::NgramError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("bad hyperparameter: {0}")]
    BadHyper(String),
    #[error("logits rows {rows} do not match {targets} targets")]
    MisalignedLoss { rows: usize, targets: usize },
    #[error("target id {id} out of range for vocab size {k}")]
    TargetOutOfRange { id: u32, k: usize },
    #[error("robust likelihood degenerates: alpha = 1 with lm log-prob = -inf")]
    DegenerateLikelihood,
    #[error("robust loss requires a fitted n-gram language model")]
    MissingLanguageModel,
    #[error("training and validation sets must be nonempty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient in tensor {tensor}")]
    NonFiniteGradient { tensor: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SmoothedCe,
    Robust,
}

/// Optimization and loss hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Label smoothing epsilon; smoothed cross-entropy only.
    pub label_smoothing: f64,
    /// Noise rate alpha of the robust mixture; robust loss only.
    pub alpha: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Overrides the model config's dropout when set.
    pub dropout: Option<f32>,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::SmoothedCe,
            label_smoothing: 0.1,
            alpha: 0.25,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            dropout: None,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_median_ned: f64,
    pub val_mean_ned: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

impl TrainingHistory {
    pub fn best_val_median_ned(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|e| e.val_median_ned)
            .min_by(|a, b| a.total_cmp(b))
    }

    /// CSV rows: epoch, train loss, val median NED, val mean NED.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_median_ned,val_mean_ned\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_median_ned, e.val_mean_ned
            ));
        }
        out
    }
}

struct Example {
    x: TokenSeq,
    dec_in: TokenSeq,
    targets: Vec<u32>,
    lm_log_prob: f64,
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed, tag), a), b)
}

fn validate(cfg: &TrainConfig) -> Result<(), TrainError> {
    if !(0.0..=1.0).contains(&cfg.label_smoothing) {
        return Err(TrainError::BadHyper(format!(
            "label_smoothing {} outside [0,1]",
            cfg.label_smoothing
        )));
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(TrainError::BadHyper(format!(
            "alpha {} outside [0,1]",
            cfg.alpha
        )));
    }
    if cfg.learning_rate <= 0.0 {
        return Err(TrainError::BadHyper(format!(
            "learning_rate {} must be positive",
            cfg.learning_rate
        )));
    }
    if cfg.weight_decay < 0.0 {
        return Err(TrainError::BadHyper(format!(
            "weight_decay {} must be non-negative",
            cfg.weight_decay
        )));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(TrainError::BadHyper(
            "batch_size and max_epochs must be >= 1".into(),
        ));
    }
    Ok(())
}

fn prepare_examples(
    pairs: &[TextPair],
    vocab: &Vocab,
    cfg: &ModelConfig,
    lm: Option<&NGramModel>,
) -> Result<Vec<Example>, TrainError> {
    pairs
        .iter()
        .map(|pair| {
            let x = encoder_input(vocab, &pair.student);
            let (dec_in, targets) = teacher_sequences(vocab, &pair.teacher);
            let longest = x.len().max(dec_in.len());
            if longest > cfg.max_seq_len {
                return Err(TrainError::Model(
                    crate::model::ModelError::SequenceTooLong {
                        len: longest,
                        max: cfg.max_seq_len,
                    },
                ));
            }
            let lm_log_prob = match lm {
                Some(model) => model.log_prob_seq(&TokenSeq(targets.clone()))?,
                None => f64::NEG_INFINITY,
            };
            Ok(Example {
                x,
                dec_in,
                targets,
                lm_log_prob,
            })
        })
        .collect()
}

/// Trains from scratch (or from `init`) and returns the parameters of the
/// epoch with the lowest validation median NED (ties keep the earlier
/// epoch), along with the per-epoch history. Bitwise reproducible per seed.
pub fn train(
    train_pairs: &[TextPair],
    val_pairs: &[TextPair],
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    lm: Option<&NGramModel>,
    init: Option<&ModelParams>,
) -> Result<(ModelParams, TrainingHistory), TrainError> {
    validate(cfg)?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model_cfg.vocab_size != vocab.size() {
        return Err(TrainError::BadHyper(format!(
            "model vocab_size {} != vocabulary size {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    if cfg.loss == LossKind::Robust {
        let lm = lm.ok_or(TrainError::MissingLanguageModel)?;
        if lm.vocab_size() != vocab.size() {
            return Err(TrainError::BadHyper(format!(
                "language model vocab size {} != vocabulary size {}",
                lm.vocab_size(),
                vocab.size()
            )));
        }
    }

    let mut runtime_cfg = model_cfg.clone();
    if let Some(rate) = cfg.dropout {
        runtime_cfg.dropout_rate = rate;
    }
    runtime_cfg.validate().map_err(TrainError::Model)?;

    let mut params = match init {
        Some(p) => {
            let mut base = p.config.clone();
            base.dropout_rate = runtime_cfg.dropout_rate;
            if base != runtime_cfg {
                return Err(TrainError::BadHyper(
                    "init checkpoint architecture differs from model config".into(),
                ));
            }
            let mut params = p.clone();
            params.config = runtime_cfg.clone();
            params
        }
        None => init_params(&runtime_cfg, cfg.seed)?,
    };
    let layout = Layout::new(&runtime_cfg);

    let lm_for_loss = if cfg.loss == LossKind::Robust { lm } else { None };
    let examples = prepare_examples(train_pairs, vocab, &runtime_cfg, lm_for_loss)?;

    let rate = runtime_cfg.dropout_rate as f64;
    let mut state = AdamState::new(&params.tensors);
    let hyper = AdamHyper::default();

    let mut history = TrainingHistory::default();
    let mut best_params = params.clone();
    let mut best_median = f64::INFINITY;
    let mut bad_epochs = 0usize;

    // Validation decodes stop at EOS; cap runaway generations a little past
    // the longest validation teacher.
    let val_cap = val_pairs
        .iter()
        .map(|p| p.teacher.chars().count() + 16)
        .max()
        .unwrap_or(runtime_cfg.max_seq_len)
        .min(runtime_cfg.max_seq_len);

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grad_acc: Vec<Tensor<f32>> = (0..layout.len())
        .map(|i| Tensor::zeros(layout.shape(i)))
        .collect();

    for epoch in 0..cfg.max_epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            for g in grad_acc.iter_mut() {
                for v in g.data_mut() {
                    *v = 0.0;
                }
            }
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;

            for &ex_idx in batch {
                let ex = &examples[ex_idx];
                let mut tape: Tape<f32> = Tape::new();
                let leaves = leaves_from(&mut tape, &params.tensors);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(
                    cfg.seed,
                    STREAM_DROPOUT,
                    epoch as u64,
                    ex_idx as u64,
                ));
                let mut rng_opt = if rate > 0.0 { Some(&mut drop_rng) } else { None };
                let enc = build_encoder(
                    &mut tape,
                    &runtime_cfg,
                    &layout,
                    &leaves,
                    ex.x.as_slice(),
                    rate,
                    &mut rng_opt,
                );
                let logits = build_decoder(
                    &mut tape,
                    &runtime_cfg,
                    &layout,
                    &leaves,
                    enc,
                    ex.dec_in.as_slice(),
                    rate,
                    &mut rng_opt,
                );
                let loss_node = match cfg.loss {
                    LossKind::SmoothedCe => {
                        tape.smoothed_ce(logits, &ex.targets, cfg.label_smoothing)
                    }
                    LossKind::Robust => {
                        let l = tape.seq_log_lik(logits, &ex.targets);
                        tape.robust_mix(l, ex.lm_log_prob, cfg.alpha)
                    }
                };
                batch_loss += tape.value(loss_node).item() as f64;
                let grads = tape.backward(loss_node);
                for (i, leaf) in leaves.iter().enumerate() {
                    if let Some(g) = &grads[leaf.index()] {
                        grad_acc[i].add_assign_scaled(g, scale);
                    }
                }
            }

            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            if let Some(i) = grad_acc.iter().position(|g| !g.all_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    tensor: layout.name(i).to_string(),
                });
            }
            adamw_step(
                &mut params.tensors,
                &grad_acc,
                &mut state,
                cfg.learning_rate as f32,
                cfg.weight_decay as f32,
                &hyper,
            );
            epoch_loss_sum += batch_loss;
        }

        let mut neds = Vec::with_capacity(val_pairs.len());
        for pair in val_pairs {
            let x = encoder_input(vocab, &pair.student);
            let decoded = greedy_decode(&params, vocab, &x, 1.0, val_cap)?;
            neds.push(normalized_ed(&decoded.text, &pair.teacher));
        }
        let (val_mean_ned, val_median_ned, _) = summarize(&neds)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss_sum / examples.len() as f64,
            val_median_ned,
            val_mean_ned,
        });

        if val_median_ned < best_median {
            best_median = val_median_ned;
            best_params = params.clone();
            history.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                break;
            }
        }
    }

    Ok((best_params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{generate_pairs, AugmentConfig};

    fn tiny_model_cfg(vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 64,
            max_seq_len: 48,
            dropout_rate: 0.0,
            vocab_size: vocab.size(),
        }
    }

    #[test]
    fn smoke_single_epoch_two_pairs() {
        let pairs = vec![TextPair::new("ab", "ab"), TextPair::new("ba", "ba")];
        let vocab = Vocab::build(["ab"]);
        let model_cfg = tiny_model_cfg(&vocab);
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let (params, history) =
            train(&pairs, &pairs, &vocab, &model_cfg, &cfg, None, None).unwrap();
        assert_eq!(history.epochs.len(), 1);
        assert!(history.epochs[0].train_loss.is_finite());
        assert!(params.tensors.iter().all(|t| t.all_finite()));
    }

    #[test]
    fn returned_params_match_best_history_entry() {
        let texts: Vec<String> = (0..24)
            .map(|i| format!("w{} xy", ["on", "tw", "th", "fo"][i % 4]))
            .collect();
        let pairs = generate_pairs(&texts, &AugmentConfig::zero(3));
        let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
        let model_cfg = tiny_model_cfg(&vocab);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 8,
            learning_rate: 2e-3,
            patience: 10,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, history) =
            train(&pairs[..16], &pairs[16..], &vocab, &model_cfg, &cfg, None, None).unwrap();
        let min = history.best_val_median_ned().unwrap();
        assert_eq!(
            history.epochs[history.best_epoch].val_median_ned, min,
            "best epoch must hold the minimum val median NED"
        );
    }

    #[test]
    fn training_is_reproducible_per_seed() {
        let pairs = vec![
            TextPair::new("abc", "abc"),
            TextPair::new("cab", "cab"),
            TextPair::new("bca", "bca"),
        ];
        let vocab = Vocab::build(["abc"]);
        let model_cfg = ModelConfig {
            dropout_rate: 0.1,
            ..tiny_model_cfg(&vocab)
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&pairs, &pairs, &vocab, &model_cfg, &cfg, None, None).unwrap();
        let (b, hb) = train(&pairs, &pairs, &vocab, &model_cfg, &cfg, None, None).unwrap();
        assert_eq!(a.tensors, b.tensors);
        assert_eq!(ha.epochs.len(), hb.epochs.len());
        for (x, y) in ha.epochs.iter().zip(&hb.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        }
    }

    #[test]
    fn robust_without_lm_is_an_error() {
        let pairs = vec![TextPair::new("a", "a")];
        let vocab = Vocab::build(["a"]);
        let model_cfg = tiny_model_cfg(&vocab);
        let cfg = TrainConfig {
            loss: LossKind::Robust,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&pairs, &pairs, &vocab, &model_cfg, &cfg, None, None),
            Err(TrainError::MissingLanguageModel)
        ));
    }

    #[test]
    fn copy_task_reaches_low_ned() {
        // Identity pairs over a tiny alphabet; the model must learn to copy.
        let words = ["cat", "dog", "sun", "map", "tree", "fish", "red", "blue"];
        let texts: Vec<String> = (0..230)
            .map(|i| {
                format!(
                    "{} {}",
                    words[i % words.len()],
                    words[(i / words.len() + i) % words.len()]
                )
            })
            .collect();
        let pairs = generate_pairs(&texts, &AugmentConfig::zero(0));
        let vocab = Vocab::build(texts.iter().map(|s| s.as_str()));
        let model_cfg = tiny_model_cfg(&vocab);
        let cfg = TrainConfig {
            max_epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            weight_decay: 0.01,
            patience: 30,
            seed: 7,
            ..TrainConfig::default()
        };
        let (_, history) = train(
            &pairs[..200],
            &pairs[200..],
            &vocab,
            &model_cfg,
            &cfg,
            None,
            None,
        )
        .unwrap();
        let best = history.best_val_median_ned().unwrap();
        assert!(
            best <= 0.05,
            "copy task should reach val median NED <= 0.05, got {best}"
        );
    }
}

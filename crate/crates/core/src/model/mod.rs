//! Tiny encoder-decoder Transformer: pre-layer-norm residual blocks,
//! learned positional embeddings, and a token embedding tied to the output
//! projection. Small enough to train on a CPU in minutes.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CKPT_FORMAT_VERSION};
pub use forward::{
    decoder_logits_cached, encode_source, encoder_input, forward, teacher_forced_logits,
    teacher_sequences, EncodedSource, ForwardMode, Logits,
};

/// Graph-builder entry points for the training loop and gradient checker.
pub(crate) mod forward_internals {
    pub(crate) use super::forward::{build_decoder, build_encoder, leaves_from};
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequences must be nonempty")]
    EmptySequence,
    #[error("token id {id} out of range for vocab size {k}")]
    TokenOutOfRange { id: u32, k: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f32,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: trains in minutes on one CPU core.
    pub fn desk_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ffn: 512,
            max_seq_len: 256,
            dropout_rate: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads == 0
            || self.n_encoder_layers == 0
            || self.n_decoder_layers == 0
            || self.d_ffn == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::BadConfig("all size fields must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::BadConfig(format!(
                "dropout_rate {} must lie in [0,1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size < crate::text::Vocab::NUM_SPECIALS as usize {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} smaller than the special-token set",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Clone, Copy, Debug)]
pub struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

/// Fixed enumeration of every parameter tensor: names, shapes, kinds, and
/// symbolic indices into the flat tensor list. Checkpoints, the optimizer,
/// and gradient bookkeeping all share this order.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tok_embed: usize,
    pub pos_embed: usize,
    pub encoder: Vec<EncLayerIdx>,
    pub encoder_ln: LnIdx,
    pub decoder: Vec<DecLayerIdx>,
    pub decoder_ln: LnIdx,
    pub out_bias: usize,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    kinds: Vec<TensorKind>,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    kinds: Vec<TensorKind>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, kind: TensorKind) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.kinds.push(kind);
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            gain: self.push(format!("{prefix}.gain"), vec![d], TensorKind::Gain),
            bias: self.push(format!("{prefix}.bias"), vec![d], TensorKind::Bias),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        AttnIdx {
            wq: self.push(format!("{prefix}.wq"), vec![d, d], TensorKind::Weight),
            bq: self.push(format!("{prefix}.bq"), vec![d], TensorKind::Bias),
            wk: self.push(format!("{prefix}.wk"), vec![d, d], TensorKind::Weight),
            bk: self.push(format!("{prefix}.bk"), vec![d], TensorKind::Bias),
            wv: self.push(format!("{prefix}.wv"), vec![d, d], TensorKind::Weight),
            bv: self.push(format!("{prefix}.bv"), vec![d], TensorKind::Bias),
            wo: self.push(format!("{prefix}.wo"), vec![d, d], TensorKind::Weight),
            bo: self.push(format!("{prefix}.bo"), vec![d], TensorKind::Bias),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnIdx {
        FfnIdx {
            w1: self.push(format!("{prefix}.w1"), vec![d, f], TensorKind::Weight),
            b1: self.push(format!("{prefix}.b1"), vec![f], TensorKind::Bias),
            w2: self.push(format!("{prefix}.w2"), vec![f, d], TensorKind::Weight),
            b2: self.push(format!("{prefix}.b2"), vec![d], TensorKind::Bias),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
            kinds: Vec::new(),
        };
        let (d, f, k) = (cfg.d_model, cfg.d_ffn, cfg.vocab_size);
        let tok_embed = b.push("tok_embed".into(), vec![k, d], TensorKind::Weight);
        let pos_embed = b.push("pos_embed".into(), vec![cfg.max_seq_len, d], TensorKind::Weight);
        let encoder = (0..cfg.n_encoder_layers)
            .map(|i| EncLayerIdx {
                ln1: b.ln(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ln2: b.ln(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, f),
            })
            .collect();
        let encoder_ln = b.ln("enc_ln", d);
        let decoder = (0..cfg.n_decoder_layers)
            .map(|i| DecLayerIdx {
                ln1: b.ln(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self_attn"), d),
                ln2: b.ln(&format!("dec.{i}.ln2"), d),
                cross_attn: b.attn(&format!("dec.{i}.cross_attn"), d),
                ln3: b.ln(&format!("dec.{i}.ln3"), d),
                ffn: b.ffn(&format!("dec.{i}.ffn"), d, f),
            })
            .collect();
        let decoder_ln = b.ln("dec_ln", d);
        let out_bias = b.push("out_bias".into(), vec![k], TensorKind::Bias);
        Layout {
            tok_embed,
            pos_embed,
            encoder,
            encoder_ln,
            decoder,
            decoder_ln,
            out_bias,
            names: b.names,
            shapes: b.shapes,
            kinds: b.kinds,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn kind(&self, i: usize) -> TensorKind {
        self.kinds[i]
    }
}

/// All weights of one model instance, in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<f32>>,
}

impl ModelParams {
    pub fn n_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Initializes parameters: weights from a scaled uniform
/// (+-sqrt(6/(fan_in+fan_out))), biases and layer-norm offsets zero,
/// layer-norm gains one. Deterministic per seed.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = (0..layout.len())
        .map(|i| {
            let shape = layout.shape(i).to_vec();
            match layout.kind(i) {
                TensorKind::Weight => {
                    let (fan_in, fan_out) = (shape[0], shape[1]);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n: usize = shape.iter().product();
                    let data: Vec<f32> = (0..n)
                        .map(|_| rng.random_range(-bound..bound) as f32)
                        .collect();
                    Tensor::from_vec(&shape, data)
                }
                TensorKind::Bias => Tensor::zeros(&shape),
                TensorKind::Gain => {
                    let n: usize = shape.iter().product();
                    Tensor::from_vec(&shape, vec![1.0; n])
                }
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 16,
            max_seq_len: 16,
            dropout_rate: 0.0,
            vocab_size: 10,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = micro_config();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 8).unwrap();
        assert!(a.tensors.iter().zip(&c.tensors).any(|(x, y)| x != y));
    }

    #[test]
    fn init_biases_zero_gains_one() {
        let cfg = micro_config();
        let layout = Layout::new(&cfg);
        let p = init_params(&cfg, 3).unwrap();
        for i in 0..layout.len() {
            match layout.kind(i) {
                TensorKind::Bias => {
                    assert!(p.tensors[i].data().iter().all(|&v| v == 0.0), "{}", layout.name(i));
                }
                TensorKind::Gain => {
                    assert!(p.tensors[i].data().iter().all(|&v| v == 1.0), "{}", layout.name(i));
                }
                TensorKind::Weight => {
                    let (r, c) = (layout.shape(i)[0], layout.shape(i)[1]);
                    let bound = (6.0 / (r + c) as f64).sqrt() as f32;
                    assert!(p.tensors[i].data().iter().all(|&v| v.abs() <= bound));
                }
            }
        }
    }

    #[test]
    fn layout_names_are_unique() {
        let layout = Layout::new(&micro_config());
        let mut names: Vec<&str> = (0..layout.len()).map(|i| layout.name(i)).collect();
        let total = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), total);
    }

    #[test]
    fn config_validation() {
        let mut cfg = micro_config();
        cfg.d_model = 9; // not divisible by 2 heads
        assert!(cfg.validate().is_err());
        let mut cfg = micro_config();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
        assert!(micro_config().validate().is_ok());
    }
}

//! Graph construction for the encoder-decoder forward pass.
//!
//! One builder serves training (gradients flow through a single tape) and
//! decoding (encoder output cached once, decoder re-run per step). Both
//! paths execute identical row-wise kernels, so eval logits agree bitwise
//! however they are produced.

use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::{TextPair, TokenSeq, Vocab};

use super::{AttnIdx, Layout, LnIdx, ModelConfig, ModelError, ModelParams};

/// Pre-softmax scores, one row per decoder input position.
pub type Logits = Tensor<f32>;

pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

pub(crate) fn leaves_from<F: Scalar>(tape: &mut Tape<F>, tensors: &[Tensor<f32>]) -> Vec<NodeId> {
    tensors
        .iter()
        .map(|t| tape.leaf(t.map(|v| F::from_f64(v as f64))))
        .collect()
}

fn apply_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    a: NodeId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    match rng {
        Some(r) if rate > 0.0 => tape.dropout(a, rate, r),
        _ => a,
    }
}

fn layer_norm<F: Scalar>(tape: &mut Tape<F>, leaves: &[NodeId], idx: LnIdx, a: NodeId) -> NodeId {
    tape.layer_norm(a, leaves[idx.gain], leaves[idx.bias])
}

fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    leaves: &[NodeId],
    idx: &AttnIdx,
    n_heads: usize,
    q_in: NodeId,
    kv_in: NodeId,
    causal: bool,
) -> NodeId {
    let d = tape.value(leaves[idx.wq]).shape()[0];
    let dh = d / n_heads;

    let q = tape.matmul(q_in, leaves[idx.wq]);
    let q = tape.add_bias(q, leaves[idx.bq]);
    let k = tape.matmul(kv_in, leaves[idx.wk]);
    let k = tape.add_bias(k, leaves[idx.bk]);
    let v = tape.matmul(kv_in, leaves[idx.wv]);
    let v = tape.add_bias(v, leaves[idx.bv]);

    let qh = tape.head_split(q, n_heads);
    let kh = tape.head_split(k, n_heads);
    let vh = tape.head_split(v, n_heads);

    let scores = tape.bmm_bt(qh, kh);
    let scores = tape.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = tape.softmax(scores, causal);
    let ctx = tape.bmm(probs, vh);
    let merged = tape.head_merge(ctx);

    let out = tape.matmul(merged, leaves[idx.wo]);
    tape.add_bias(out, leaves[idx.bo])
}

fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    leaves: &[NodeId],
    idx: &super::FfnIdx,
    a: NodeId,
) -> NodeId {
    let h = tape.matmul(a, leaves[idx.w1]);
    let h = tape.add_bias(h, leaves[idx.b1]);
    let h = tape.gelu(h);
    let h = tape.matmul(h, leaves[idx.w2]);
    tape.add_bias(h, leaves[idx.b2])
}

fn embed_sequence<F: Scalar>(
    tape: &mut Tape<F>,
    leaves: &[NodeId],
    layout: &Layout,
    ids: &[u32],
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    let positions: Vec<u32> = (0..ids.len() as u32).collect();
    let tok = tape.embed(leaves[layout.tok_embed], ids);
    let pos = tape.embed(leaves[layout.pos_embed], &positions);
    let h = tape.add(tok, pos);
    apply_dropout(tape, h, rate, rng)
}

pub(crate) fn build_encoder<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    layout: &Layout,
    leaves: &[NodeId],
    x_ids: &[u32],
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    let mut h = embed_sequence(tape, leaves, layout, x_ids, rate, rng);
    for layer in &layout.encoder {
        let a = layer_norm(tape, leaves, layer.ln1, h);
        let sa = attention(tape, leaves, &layer.attn, cfg.n_heads, a, a, false);
        let sa = apply_dropout(tape, sa, rate, rng);
        h = tape.add(h, sa);

        let a = layer_norm(tape, leaves, layer.ln2, h);
        let ff = feed_forward(tape, leaves, &layer.ffn, a);
        let ff = apply_dropout(tape, ff, rate, rng);
        h = tape.add(h, ff);
    }
    layer_norm(tape, leaves, layout.encoder_ln, h)
}

pub(crate) fn build_decoder<F: Scalar>(
    tape: &mut Tape<F>,
    cfg: &ModelConfig,
    layout: &Layout,
    leaves: &[NodeId],
    enc_out: NodeId,
    dec_ids: &[u32],
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> NodeId {
    let mut h = embed_sequence(tape, leaves, layout, dec_ids, rate, rng);
    for layer in &layout.decoder {
        let a = layer_norm(tape, leaves, layer.ln1, h);
        let sa = attention(tape, leaves, &layer.self_attn, cfg.n_heads, a, a, true);
        let sa = apply_dropout(tape, sa, rate, rng);
        h = tape.add(h, sa);

        let a = layer_norm(tape, leaves, layer.ln2, h);
        let ca = attention(tape, leaves, &layer.cross_attn, cfg.n_heads, a, enc_out, false);
        let ca = apply_dropout(tape, ca, rate, rng);
        h = tape.add(h, ca);

        let a = layer_norm(tape, leaves, layer.ln3, h);
        let ff = feed_forward(tape, leaves, &layer.ffn, a);
        let ff = apply_dropout(tape, ff, rate, rng);
        h = tape.add(h, ff);
    }
    let h = layer_norm(tape, leaves, layout.decoder_ln, h);
    // Tied output projection: logits = h @ tok_embed^T + out_bias.
    let logits = tape.matmul_bt(h, leaves[layout.tok_embed]);
    tape.add_bias(logits, leaves[layout.out_bias])
}

fn check_seq(cfg: &ModelConfig, ids: &[u32]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            k: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Full forward pass. Row i of the output holds the logits for the token
/// following `y_prefix[i]` given all of `x`; the decoder self-attention is
/// causally masked, so row i never sees positions beyond i.
pub fn forward(
    params: &ModelParams,
    x: &TokenSeq,
    y_prefix: &TokenSeq,
    mode: ForwardMode,
) -> Result<Logits, ModelError> {
    check_seq(&params.config, x.as_slice())?;
    check_seq(&params.config, y_prefix.as_slice())?;

    let (rate, mut rng) = match mode {
        ForwardMode::Eval => (0.0, None),
        ForwardMode::Train { rng } => (params.config.dropout_rate as f64, Some(rng)),
    };
    let layout = Layout::new(&params.config);
    let mut tape: Tape<f32> = Tape::new();
    let leaves = leaves_from(&mut tape, &params.tensors);
    let enc = build_encoder(
        &mut tape,
        &params.config,
        &layout,
        &leaves,
        x.as_slice(),
        rate,
        &mut rng,
    );
    let logits = build_decoder(
        &mut tape,
        &params.config,
        &layout,
        &leaves,
        enc,
        y_prefix.as_slice(),
        rate,
        &mut rng,
    );
    Ok(tape.value(logits).clone())
}

/// Encoder output cached for repeated decoding against one source.
pub struct EncodedSource {
    pub(crate) enc_out: Tensor<f32>,
}

pub fn encode_source(params: &ModelParams, x: &TokenSeq) -> Result<EncodedSource, ModelError> {
    check_seq(&params.config, x.as_slice())?;
    let layout = Layout::new(&params.config);
    let mut tape: Tape<f32> = Tape::new();
    let leaves = leaves_from(&mut tape, &params.tensors);
    let enc = build_encoder(
        &mut tape,
        &params.config,
        &layout,
        &leaves,
        x.as_slice(),
        0.0,
        &mut None,
    );
    Ok(EncodedSource {
        enc_out: tape.value(enc).clone(),
    })
}

/// Decoder-only eval forward against a cached source encoding.
pub fn decoder_logits_cached(
    params: &ModelParams,
    src: &EncodedSource,
    y_prefix: &TokenSeq,
) -> Result<Logits, ModelError> {
    check_seq(&params.config, y_prefix.as_slice())?;
    let layout = Layout::new(&params.config);
    let mut tape: Tape<f32> = Tape::new();
    let leaves = leaves_from(&mut tape, &params.tensors);
    let enc = tape.leaf(src.enc_out.clone());
    let logits = build_decoder(
        &mut tape,
        &params.config,
        &layout,
        &leaves,
        enc,
        y_prefix.as_slice(),
        0.0,
        &mut None,
    );
    Ok(tape.value(logits).clone())
}

/// Encoder input convention: [BOS, characters..., EOS].
pub fn encoder_input(vocab: &Vocab, text: &str) -> TokenSeq {
    let mut ids = vec![Vocab::BOS];
    ids.extend_from_slice(vocab.encode(text).as_slice());
    ids.push(Vocab::EOS);
    TokenSeq(ids)
}

/// Decoder input [BOS, characters...] and aligned targets [characters..., EOS].
pub fn teacher_sequences(vocab: &Vocab, text: &str) -> (TokenSeq, Vec<u32>) {
    let chars = vocab.encode(text);
    let mut dec_in = vec![Vocab::BOS];
    dec_in.extend_from_slice(chars.as_slice());
    let mut targets = chars.0;
    targets.push(Vocab::EOS);
    (TokenSeq(dec_in), targets)
}

/// Teacher-forced eval logits for one pair, with the aligned target ids.
pub fn teacher_forced_logits(
    params: &ModelParams,
    vocab: &Vocab,
    pair: &TextPair,
) -> Result<(Logits, Vec<u32>), ModelError> {
    let x = encoder_input(vocab, &pair.student);
    let (dec_in, targets) = teacher_sequences(vocab, &pair.teacher);
    let logits = forward(params, &x, &dec_in, ForwardMode::Eval)?;
    Ok((logits, targets))
}

//! Greedy decoding, temperature-scaled log-probabilities, deep-ensemble
//! probability averaging, confidence scoring, and the identity baseline.

use thiserror::Error;

use crate::model::{decoder_logits_cached, encode_source, EncodedSource, ModelParams};
use crate::tensor::log_softmax_row_f64;
use crate::text::{TokenSeq, Vocab};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("max_len {len} exceeds model max_seq_len {max}")]
    MaxLenTooLong { len: usize, max: usize },
    #[error("ensemble needs at least one model")]
    EmptyEnsemble,
    #[error("ensemble models disagree on config or vocab size")]
    ConfigMismatch,
    #[error("confidence of an empty sequence is undefined")]
    EmptyTokenList,
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// A decoded translation with per-token log-probabilities (EOS included)
/// and their mean as the confidence C.
#[derive(Clone, Debug)]
pub struct TranslationResult {
    pub tokens: TokenSeq,
    pub text: String,
    pub token_log_probs: Vec<f64>,
    pub confidence: f64,
}

/// Softmax temperature; scales logits by 1/T.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureScaler {
    temperature: f64,
}

impl TemperatureScaler {
    pub fn new(temperature: f64) -> Result<TemperatureScaler, DecodeError> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(TemperatureScaler { temperature })
        } else {
            Err(DecodeError::BadTemperature(temperature))
        }
    }

    pub fn get(&self) -> f64 {
        self.temperature
    }
}

/// Next-token logits given the tokens emitted so far (BOS handling is the
/// implementation's business). Lets tests drive the decoder with stubs.
pub trait StepScorer {
    fn next_logits(&mut self, emitted: &[u32]) -> Vec<f32>;
}

/// Real-model scorer: encodes the source once, re-runs the decoder per step.
pub struct ModelStepScorer<'a> {
    params: &'a ModelParams,
    src: EncodedSource,
}

impl<'a> ModelStepScorer<'a> {
    pub fn new(params: &'a ModelParams, x: &TokenSeq) -> Result<Self, DecodeError> {
        Ok(ModelStepScorer {
            params,
            src: encode_source(params, x)?,
        })
    }
}

impl StepScorer for ModelStepScorer<'_> {
    fn next_logits(&mut self, emitted: &[u32]) -> Vec<f32> {
        let mut dec_in = vec![Vocab::BOS];
        dec_in.extend_from_slice(emitted);
        let logits = decoder_logits_cached(self.params, &self.src, &TokenSeq(dec_in))
            .expect("decode step within validated bounds");
        logits.row(logits.rows() - 1).to_vec()
    }
}

/// First-maximum argmax: ties resolve to the smallest token id.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding over an arbitrary scorer. The argmax is taken on raw
/// logits, so the decoded tokens are invariant to T by construction; only
/// the stored log-probabilities see the temperature.
pub fn greedy_decode_with(
    scorer: &mut dyn StepScorer,
    vocab: &Vocab,
    temperature: f64,
    max_len: usize,
) -> Result<TranslationResult, DecodeError> {
    let t = TemperatureScaler::new(temperature)?;
    let mut tokens: Vec<u32> = Vec::new();
    let mut emitted: Vec<u32> = Vec::new();
    let mut token_log_probs = Vec::new();

    while tokens.len() < max_len {
        let logits = scorer.next_logits(&emitted);
        let raw: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        let chosen = argmax(&raw);
        let scaled: Vec<f64> = raw.iter().map(|v| v / t.get()).collect();
        token_log_probs.push(log_softmax_row_f64(&scaled)[chosen]);
        tokens.push(chosen as u32);
        if chosen as u32 == Vocab::EOS {
            break;
        }
        emitted.push(chosen as u32);
    }

    let tokens = TokenSeq(tokens);
    let confidence = confidence(&token_log_probs)?;
    Ok(TranslationResult {
        text: vocab.decode(&tokens),
        tokens,
        token_log_probs,
        confidence,
    })
}

/// Greedy decoding of one source sequence (Eq-style argmax per step).
pub fn greedy_decode(
    params: &ModelParams,
    vocab: &Vocab,
    x: &TokenSeq,
    temperature: f64,
    max_len: usize,
) -> Result<TranslationResult, DecodeError> {
    check_max_len(params, max_len)?;
    let mut scorer = ModelStepScorer::new(params, x)?;
    greedy_decode_with(&mut scorer, vocab, temperature, max_len)
}

fn check_max_len(params: &ModelParams, max_len: usize) -> Result<(), DecodeError> {
    if max_len > params.config.max_seq_len {
        return Err(DecodeError::MaxLenTooLong {
            len: max_len,
            max: params.config.max_seq_len,
        });
    }
    Ok(())
}

/// Deep-ensemble greedy decoding over arbitrary scorers: averages the
/// members' temperature-scaled probabilities at every step and takes the
/// argmax of the mixture.
pub fn ensemble_decode_with(
    scorers: &mut [&mut dyn StepScorer],
    vocab: &Vocab,
    temperature: f64,
    max_len: usize,
) -> Result<TranslationResult, DecodeError> {
    let t = TemperatureScaler::new(temperature)?;
    if scorers.is_empty() {
        return Err(DecodeError::EmptyEnsemble);
    }
    let s = scorers.len() as f64;
    let mut tokens: Vec<u32> = Vec::new();
    let mut emitted: Vec<u32> = Vec::new();
    let mut token_log_probs = Vec::new();

    while tokens.len() < max_len {
        let mut avg: Vec<f64> = Vec::new();
        for scorer in scorers.iter_mut() {
            let logits = scorer.next_logits(&emitted);
            let scaled: Vec<f64> = logits.iter().map(|&v| v as f64 / t.get()).collect();
            let log_probs = log_softmax_row_f64(&scaled);
            if avg.is_empty() {
                avg = vec![0.0; log_probs.len()];
            } else if avg.len() != log_probs.len() {
                return Err(DecodeError::ConfigMismatch);
            }
            for (a, lp) in avg.iter_mut().zip(&log_probs) {
                *a += lp.exp() / s;
            }
        }
        let chosen = argmax(&avg);
        token_log_probs.push(avg[chosen].ln());
        tokens.push(chosen as u32);
        if chosen as u32 == Vocab::EOS {
            break;
        }
        emitted.push(chosen as u32);
    }

    let tokens = TokenSeq(tokens);
    let confidence = confidence(&token_log_probs)?;
    Ok(TranslationResult {
        text: vocab.decode(&tokens),
        tokens,
        token_log_probs,
        confidence,
    })
}

/// Deep-ensemble decoding of one source across several trained models.
pub fn ensemble_decode(
    params_list: &[&ModelParams],
    vocab: &Vocab,
    x: &TokenSeq,
    temperature: f64,
    max_len: usize,
) -> Result<TranslationResult, DecodeError> {
    if params_list.is_empty() {
        return Err(DecodeError::EmptyEnsemble);
    }
    if params_list
        .iter()
        .any(|p| p.config != params_list[0].config)
    {
        return Err(DecodeError::ConfigMismatch);
    }
    check_max_len(params_list[0], max_len)?;
    let mut scorers: Vec<ModelStepScorer> = params_list
        .iter()
        .map(|p| ModelStepScorer::new(p, x))
        .collect::<Result<_, _>>()?;
    let mut dyn_refs: Vec<&mut dyn StepScorer> = scorers
        .iter_mut()
        .map(|s| s as &mut dyn StepScorer)
        .collect();
    ensemble_decode_with(&mut dyn_refs, vocab, temperature, max_len)
}

/// Mean per-token log-likelihood C of a decoded sequence.
pub fn confidence(token_log_probs: &[f64]) -> Result<f64, DecodeError> {
    if token_log_probs.is_empty() {
        return Err(DecodeError::EmptyTokenList);
    }
    Ok(token_log_probs.iter().sum::<f64>() / token_log_probs.len() as f64)
}

/// The Identity baseline: the input text is the translation.
pub fn identity_translate(x: &str) -> String {
    x.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Stub emitting fixed one-hot-ish logits spelling a token sequence.
    struct ScriptedScorer {
        script: Vec<Vec<f32>>,
    }

    impl StepScorer for ScriptedScorer {
        fn next_logits(&mut self, emitted: &[u32]) -> Vec<f32> {
            self.script[emitted.len().min(self.script.len() - 1)].clone()
        }
    }

    fn onehot(k: usize, hot: u32, high: f32) -> Vec<f32> {
        let mut v = vec![-high; k];
        v[hot as usize] = high;
        v
    }

    #[test]
    fn scripted_decode_spells_abc() {
        let vocab = Vocab::build(["abc"]);
        let k = vocab.size();
        let (a, b, c) = (vocab.id_of('a'), vocab.id_of('b'), vocab.id_of('c'));
        // Strongly peaked logits: log-probs effectively 0 at the argmax.
        let mut scorer = ScriptedScorer {
            script: vec![
                onehot(k, a, 60.0),
                onehot(k, b, 60.0),
                onehot(k, c, 60.0),
                onehot(k, Vocab::EOS, 60.0),
            ],
        };
        let out = greedy_decode_with(&mut scorer, &vocab, 1.0, 32).unwrap();
        assert_eq!(out.text, "abc");
        assert_eq!(out.tokens.len(), 4); // a b c EOS
        assert_eq!(out.token_log_probs.len(), out.tokens.len());
        for lp in &out.token_log_probs {
            assert!(lp.abs() < 1e-6, "log prob {lp}");
        }
    }

    #[test]
    fn decoded_tokens_invariant_to_temperature() {
        let vocab = Vocab::build(["ab"]);
        let k = vocab.size();
        let script = vec![
            vec![0.3; k],
            onehot(k, vocab.id_of('b'), 2.0),
            onehot(k, Vocab::EOS, 3.0),
        ];
        let mut outputs = Vec::new();
        for t in [0.5, 1.0, 2.0] {
            let mut scorer = ScriptedScorer { script: script.clone() };
            let out = greedy_decode_with(&mut scorer, &vocab, t, 16).unwrap();
            outputs.push(out);
        }
        assert_eq!(outputs[0].tokens, outputs[1].tokens);
        assert_eq!(outputs[1].tokens, outputs[2].tokens);
        // Log-probs do change with T.
        assert_ne!(outputs[0].token_log_probs, outputs[2].token_log_probs);
    }

    #[test]
    fn never_ending_stub_caps_at_max_len() {
        let vocab = Vocab::build(["ab"]);
        let k = vocab.size();
        let mut scorer = ScriptedScorer {
            script: vec![onehot(k, vocab.id_of('a'), 50.0)],
        };
        let out = greedy_decode_with(&mut scorer, &vocab, 1.0, 7).unwrap();
        assert_eq!(out.tokens.len(), 7);
        assert!(!out.tokens.as_slice().contains(&Vocab::EOS));
    }

    #[test]
    fn argmax_ties_pick_smallest_id() {
        let vocab = Vocab::build(["ab"]);
        let k = vocab.size();
        let mut scorer = ScriptedScorer {
            script: vec![vec![1.0; k]], // all tied
        };
        let out = greedy_decode_with(&mut scorer, &vocab, 1.0, 3).unwrap();
        assert_eq!(out.tokens.as_slice()[0], 0); // PAD is id 0
    }

    #[test]
    fn stored_log_prob_matches_distribution() {
        let vocab = Vocab::build(["ab"]);
        let k = vocab.size();
        let script = vec![vec![0.7, -0.2, 0.1, 0.4, 1.3, -0.9][..k.min(6)].to_vec()];
        for t in [0.5, 1.0, 3.0] {
            let mut scorer = ScriptedScorer { script: script.clone() };
            let out = greedy_decode_with(&mut scorer, &vocab, t, 1).unwrap();
            let chosen = out.tokens.as_slice()[0] as usize;
            let scaled: Vec<f64> = script[0].iter().map(|&v| v as f64 / t).collect();
            let expect = log_softmax_row_f64(&scaled)[chosen];
            assert!((out.token_log_probs[0].exp() - expect.exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn singleton_ensemble_equals_greedy() {
        let vocab = Vocab::build(["ab"]);
        let k = vocab.size();
        let script = vec![
            onehot(k, vocab.id_of('b'), 1.5),
            onehot(k, vocab.id_of('a'), 2.5),
            onehot(k, Vocab::EOS, 2.0),
        ];
        let mut s1 = ScriptedScorer { script: script.clone() };
        let greedy = greedy_decode_with(&mut s1, &vocab, 1.0, 8).unwrap();
        let mut s2 = ScriptedScorer { script };
        let mut members: Vec<&mut dyn StepScorer> = vec![&mut s2];
        let ens = ensemble_decode_with(&mut members, &vocab, 1.0, 8).unwrap();
        assert_eq!(greedy.tokens, ens.tokens);
        for (a, b) in greedy.token_log_probs.iter().zip(&ens.token_log_probs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ensemble_averages_probabilities() {
        // Two-token world: members give (0.6, 0.4) and (0.2, 0.8); the
        // average (0.4, 0.6) must pick token 1.
        let vocab = Vocab::build([""]); // specials only, K = 4
        let k = vocab.size();
        let to_logits = |p0: f64, p1: f64| {
            // Tokens 0 and 1 carry the mass; rest effectively zero.
            vec![p0.ln() as f32, p1.ln() as f32, -50.0, -50.0][..k].to_vec()
        };
        let mut a = ScriptedScorer {
            script: vec![to_logits(0.6, 0.4)],
        };
        let mut b = ScriptedScorer {
            script: vec![to_logits(0.2, 0.8)],
        };
        let mut members: Vec<&mut dyn StepScorer> = vec![&mut a, &mut b];
        let out = ensemble_decode_with(&mut members, &vocab, 1.0, 1).unwrap();
        assert_eq!(out.tokens.as_slice(), &[1]);
        assert!((out.token_log_probs[0].exp() - 0.6).abs() < 1e-6);
    }

    #[test]
    fn ensemble_distribution_sums_to_one() {
        let vocab = Vocab::build(["abc"]);
        let k = vocab.size();
        let mut a = ScriptedScorer {
            script: vec![vec![0.3, -1.0, 0.2, 2.0, -0.4, 0.9, 1.1][..k].to_vec()],
        };
        let mut b = ScriptedScorer {
            script: vec![vec![-0.6, 0.8, 0.0, -2.0, 1.4, 0.2, -0.1][..k].to_vec()],
        };
        // Reconstruct the averaged distribution by hand and check it sums to 1.
        let mut avg = vec![0.0f64; k];
        for s in [&mut a, &mut b] {
            let logits = s.next_logits(&[]);
            let scaled: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
            for (o, lp) in avg.iter_mut().zip(log_softmax_row_f64(&scaled)) {
                *o += lp.exp() / 2.0;
            }
        }
        assert!((avg.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[-0.5, -1.5]).unwrap(), -1.0);
        assert_eq!(confidence(&[0.0]).unwrap(), 0.0);
        let a = confidence(&[-0.1, -0.7, -0.3]).unwrap();
        let b = confidence(&[-0.7, -0.3, -0.1]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(confidence(&[]).is_err());
    }

    #[test]
    fn identity_baseline() {
        assert_eq!(identity_translate("norah loves peas!"), "norah loves peas!");
        assert_eq!(identity_translate(""), "");
        let once = identity_translate("abc");
        assert_eq!(identity_translate(&once), once);
    }

    #[test]
    fn ensemble_rejects_mismatched_configs() {
        use crate::model::{init_params, ModelConfig};
        let vocab = Vocab::build(["ab"]);
        let small = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            d_ffn: 16,
            max_seq_len: 16,
            dropout_rate: 0.0,
            vocab_size: vocab.size(),
        };
        let wide = ModelConfig {
            d_model: 16,
            ..small.clone()
        };
        let a = init_params(&small, 0).unwrap();
        let b = init_params(&wide, 0).unwrap();
        let x = TokenSeq(vec![Vocab::BOS, 4, Vocab::EOS]);
        let err = ensemble_decode(&[&a, &b], &vocab, &x, 1.0, 8).unwrap_err();
        assert!(matches!(err, DecodeError::ConfigMismatch));
    }

    #[test]
    fn rejects_bad_temperature() {
        let vocab = Vocab::build(["a"]);
        let mut scorer = ScriptedScorer {
            script: vec![onehot(vocab.size(), Vocab::EOS, 10.0)],
        };
        assert!(greedy_decode_with(&mut scorer, &vocab, 0.0, 4).is_err());
        assert!(greedy_decode_with(&mut scorer, &vocab, -1.0, 4).is_err());
    }
}

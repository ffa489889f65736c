//! Token-level calibration diagnostics (ECE/MCE), temperature fitting on
//! validation likelihood, and accuracy-rejection curves.

use thiserror::Error;

use crate::decoding::TemperatureScaler;
use crate::model::{teacher_forced_logits, ModelParams};
use crate::tensor::log_softmax_row_f64;
use crate::text::TextPair;
use crate::text::Vocab;

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("no token events")]
    NoEvents,
    #[error("bins must be >= 1")]
    BadBins,
    #[error("no samples")]
    NoSamples,
    #[error("rejection fraction {0} outside [0,1)")]
    BadRejection(f64),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
}

/// One teacher-forced prediction event: the probability of the argmax token
/// and whether the argmax hit the true token.
#[derive(Clone, Copy, Debug)]
pub struct TokenEvent {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub mce: f64,
    pub n_events: usize,
    pub bins: Vec<CalibrationBin>,
}

/// Point list of (rejection fraction, retained-set metric value).
#[derive(Clone, Debug, serde::Serialize)]
pub struct RejectionCurve {
    pub metric: String,
    pub points: Vec<RejectionPoint>,
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct RejectionPoint {
    pub rejection: f64,
    pub retained: usize,
    pub value: f64,
}

/// How retained per-item values are pooled. Both pool by arithmetic mean;
/// `Mae` documents that the items are absolute errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    Mean,
    Mae,
}

/// Token events from pre-collected (logits row, target) pairs at
/// temperature T. Confidence is the max softmax(z/T) probability; the event
/// is correct when the argmax equals the target (ties to lowest id).
pub fn token_events_from_rows(rows: &[(Vec<f64>, u32)], temperature: f64) -> Vec<TokenEvent> {
    rows.iter()
        .map(|(logits, target)| {
            let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
            let log_probs = log_softmax_row_f64(&scaled);
            let mut best = 0;
            for (i, &lp) in log_probs.iter().enumerate().skip(1) {
                if lp > log_probs[best] {
                    best = i;
                }
            }
            TokenEvent {
                confidence: log_probs[best].exp(),
                correct: best as u32 == *target,
            }
        })
        .collect()
}

/// Teacher-forced logit rows with aligned targets over a pair list,
/// EOS position included.
pub fn teacher_forced_rows(
    params: &ModelParams,
    vocab: &Vocab,
    pairs: &[TextPair],
) -> Result<Vec<(Vec<f64>, u32)>, CalibError> {
    let mut rows = Vec::new();
    for pair in pairs {
        let (logits, targets) = teacher_forced_logits(params, vocab, pair)?;
        for (i, &y) in targets.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            rows.push((row, y));
        }
    }
    Ok(rows)
}

/// Teacher-forced token events over all target positions of all pairs.
pub fn collect_token_events(
    params: &ModelParams,
    vocab: &Vocab,
    pairs: &[TextPair],
    temperature: f64,
) -> Result<Vec<TokenEvent>, CalibError> {
    let rows = teacher_forced_rows(params, vocab, pairs)?;
    Ok(token_events_from_rows(&rows, temperature))
}

/// Equal-width bins over (0,1]: bin m covers ((m-1)/M, m/M].
fn bin_index(confidence: f64, bins: usize) -> usize {
    let raw = (confidence * bins as f64 - 1e-9).ceil() as isize - 1;
    raw.clamp(0, bins as isize - 1) as usize
}

/// ECE and MCE over equal-width confidence bins.
pub fn calibration_report(
    events: &[TokenEvent],
    bins: usize,
) -> Result<CalibrationReport, CalibError> {
    if events.is_empty() {
        return Err(CalibError::NoEvents);
    }
    if bins == 0 {
        return Err(CalibError::BadBins);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut hits = vec![0usize; bins];
    for e in events {
        let b = bin_index(e.confidence, bins);
        count[b] += 1;
        conf_sum[b] += e.confidence;
        hits[b] += usize::from(e.correct);
    }
    let n = events.len() as f64;
    let mut ece = 0.0;
    let mut mce: f64 = 0.0;
    let mut out_bins = Vec::with_capacity(bins);
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        if count[b] == 0 {
            out_bins.push(CalibrationBin {
                lo,
                hi,
                count: 0,
                mean_confidence: 0.0,
                accuracy: 0.0,
            });
            continue;
        }
        let mean_conf = conf_sum[b] / count[b] as f64;
        let acc = hits[b] as f64 / count[b] as f64;
        let gap = (acc - mean_conf).abs();
        ece += (count[b] as f64 / n) * gap;
        mce = mce.max(gap);
        out_bins.push(CalibrationBin {
            lo,
            hi,
            count: count[b],
            mean_confidence: mean_conf,
            accuracy: acc,
        });
    }
    Ok(CalibrationReport {
        ece,
        mce,
        n_events: events.len(),
        bins: out_bins,
    })
}

fn nll_at(rows: &[(Vec<f64>, u32)], temperature: f64) -> f64 {
    rows.iter()
        .map(|(logits, target)| {
            let scaled: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
            -log_softmax_row_f64(&scaled)[*target as usize]
        })
        .sum()
}

/// Fits T by golden-section search on log T in [ln 0.05, ln 10] (interval
/// tolerance 1e-3), maximizing teacher-forced log-likelihood. Falls back to
/// T = 1 if the search cannot beat the unscaled likelihood.
pub fn fit_temperature_from_rows(
    rows: &[(Vec<f64>, u32)],
) -> Result<TemperatureScaler, CalibError> {
    if rows.is_empty() {
        return Err(CalibError::NoSamples);
    }
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.05f64.ln(), 10.0f64.ln());
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut f_c = nll_at(rows, c.exp());
    let mut f_d = nll_at(rows, d.exp());
    while hi - lo > 1e-3 {
        if f_c < f_d {
            hi = d;
            d = c;
            f_d = f_c;
            c = hi - phi * (hi - lo);
            f_c = nll_at(rows, c.exp());
        } else {
            lo = c;
            c = d;
            f_c = f_d;
            d = lo + phi * (hi - lo);
            f_d = nll_at(rows, d.exp());
        }
    }
    let t_star = ((lo + hi) / 2.0).exp();
    let best = if nll_at(rows, t_star) <= nll_at(rows, 1.0) {
        t_star
    } else {
        1.0
    };
    Ok(TemperatureScaler::new(best)?)
}

/// Grid fallback: evaluates 50 log-spaced temperatures in [0.05, 10] and
/// returns the best; available for callers that distrust golden section.
pub fn fit_temperature_grid(rows: &[(Vec<f64>, u32)]) -> Result<TemperatureScaler, CalibError> {
    if rows.is_empty() {
        return Err(CalibError::NoSamples);
    }
    let (lo, hi) = (0.05f64.ln(), 10.0f64.ln());
    let mut best = (1.0, nll_at(rows, 1.0));
    for i in 0..50 {
        let t = (lo + (hi - lo) * i as f64 / 49.0).exp();
        let v = nll_at(rows, t);
        if v < best.1 {
            best = (t, v);
        }
    }
    Ok(TemperatureScaler::new(best.0)?)
}

/// Fits the softmax temperature on validation pairs; model weights untouched.
pub fn fit_temperature(
    params: &ModelParams,
    vocab: &Vocab,
    val_pairs: &[TextPair],
) -> Result<TemperatureScaler, CalibError> {
    let rows = teacher_forced_rows(params, vocab, val_pairs)?;
    fit_temperature_from_rows(&rows)
}

/// Sorts samples (confidence, per-item metric) by confidence descending
/// (stable) and, for each rejection fraction r in the grid, pools the top
/// ceil((1-r) * N) items.
pub fn rejection_curve(
    samples: &[(f64, f64)],
    aggregate: Aggregate,
    grid: &[f64],
) -> Result<RejectionCurve, CalibError> {
    if samples.is_empty() {
        return Err(CalibError::NoSamples);
    }
    if let Some(&bad) = grid.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(CalibError::BadRejection(bad));
    }
    let mut rs: Vec<f64> = grid.to_vec();
    rs.sort_by(|a, b| a.total_cmp(b));
    rs.dedup();

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].0.total_cmp(&samples[a].0));

    let n = samples.len();
    let points = rs
        .iter()
        .map(|&r| {
            let keep = (((1.0 - r) * n as f64).ceil() as usize).max(1);
            let sum: f64 = order[..keep].iter().map(|&i| samples[i].1).sum();
            RejectionPoint {
                rejection: r,
                retained: keep,
                value: sum / keep as f64,
            }
        })
        .collect();
    let metric = match aggregate {
        Aggregate::Mean => "mean",
        Aggregate::Mae => "mae",
    };
    Ok(RejectionCurve {
        metric: metric.to_string(),
        points,
    })
}

/// Default rejection grid {0, 0.05, ..., 0.95}.
pub fn default_rejection_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 * 0.05).collect()
}

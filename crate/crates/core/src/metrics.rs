//! Edit distance, readability metrics, and the summary statistics used to
//! evaluate translations against teacher texts.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
}

/// Character-level Levenshtein distance over Unicode scalar values, unit
/// costs, two-row dynamic program.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ED normalized by the longer length; 0 when both strings are empty.
pub fn normalized_ed(a: &str, b: &str) -> f64 {
    let la = a.chars().count();
    let lb = b.chars().count();
    let denom = la.max(lb);
    if denom == 0 {
        return 0.0;
    }
    edit_distance(a, b) as f64 / denom as f64
}

/// Count statistics feeding the readability formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TextStats {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
    /// Words longer than 6 characters after stripping.
    pub long_words: usize,
}

impl TextStats {
    pub fn new(words: usize, sentences: usize, syllables: usize, long_words: usize) -> Self {
        TextStats {
            words,
            sentences,
            syllables,
            long_words,
        }
    }
}

/// Syllables of one stripped word: maximal contiguous vowel groups
/// (a e i o u y, case-insensitive), minimum 1.
fn syllables_in_word(word: &str) -> usize {
    let is_vowel = |c: char| {
        matches!(
            c.to_ascii_lowercase(),
            'a' | 'e' | 'i' | 'o' | 'u' | 'y'
        )
    };
    let mut groups = 0;
    let mut in_group = false;
    for c in word.chars() {
        if is_vowel(c) {
            if !in_group {
                groups += 1;
            }
            in_group = true;
        } else {
            in_group = false;
        }
    }
    groups.max(1)
}

/// Computes word/sentence/syllable/long-word counts.
///
/// Words are whitespace-separated tokens with leading and trailing
/// non-alphanumeric characters stripped (internal apostrophes survive);
/// empty tokens are not counted. Sentences are maximal runs of `.`, `!`,
/// `?` (so "?!" ends one sentence), minimum 1 when any word exists.
pub fn text_stats(text: &str) -> TextStats {
    let mut words = 0;
    let mut syllables = 0;
    let mut long_words = 0;
    for token in text.split_whitespace() {
        let stripped = token.trim_matches(|c: char| !c.is_alphanumeric());
        if stripped.is_empty() {
            continue;
        }
        words += 1;
        syllables += syllables_in_word(stripped);
        if stripped.chars().count() > 6 {
            long_words += 1;
        }
    }

    let mut sentences = 0;
    let mut in_run = false;
    for c in text.chars() {
        if matches!(c, '.' | '!' | '?') {
            if !in_run {
                sentences += 1;
            }
            in_run = true;
        } else {
            in_run = false;
        }
    }
    if words > 0 {
        sentences = sentences.max(1);
    } else {
        sentences = 0;
        syllables = 0;
        long_words = 0;
    }
    TextStats {
        words,
        sentences,
        syllables,
        long_words,
    }
}

pub const FK_CLIP: (f64, f64) = (-3.4, 36.0);
pub const LIX_CLIP: (f64, f64) = (0.0, 110.0);

/// Flesch-Kincaid grade level, clipped to [-3.4, 36]. Zero-word input maps
/// to the lower clip.
pub fn flesch_kincaid(stats: TextStats) -> f64 {
    if stats.words == 0 {
        return FK_CLIP.0;
    }
    let w = stats.words as f64;
    let s = stats.sentences as f64;
    let raw = 0.39 * (w / s) + 11.8 * (stats.syllables as f64 / w) - 15.59;
    raw.clamp(FK_CLIP.0, FK_CLIP.1)
}

/// LIX readability index, clipped to [0, 110]. Zero-word input maps to 0.
pub fn lix(stats: TextStats) -> f64 {
    if stats.words == 0 {
        return LIX_CLIP.0;
    }
    let w = stats.words as f64;
    let s = stats.sentences as f64;
    let raw = w / s + 100.0 * (stats.long_words as f64 / w);
    raw.clamp(LIX_CLIP.0, LIX_CLIP.1)
}

/// Mean absolute error between aligned prediction and truth lists.
pub fn mae(predictions: &[f64], truths: &[f64]) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Mean, median (even n averages the middle pair), and standard error of
/// the mean (sample std dev over sqrt n; 0 for n = 1).
pub fn summarize(values: &[f64]) -> Result<(f64, f64, f64), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let sem = if n == 1 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    };
    Ok((mean, median, sem))
}

/// Summary of translation quality against teacher texts.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mean_ed: f64,
    pub sem_ed: f64,
    pub median_ed: f64,
    pub mean_ned: f64,
    pub sem_ned: f64,
    pub median_ned: f64,
    pub fk_mae: f64,
    pub fk_mae_sem: f64,
    pub lix_mae: f64,
    pub lix_mae_sem: f64,
}

/// Per-pair raw values behind a [`MetricsReport`]; one row per pair.
#[derive(Clone, Debug)]
pub struct PerPairMetrics {
    pub ed: f64,
    pub ned: f64,
    pub fk_pred: f64,
    pub fk_true: f64,
    pub lix_pred: f64,
    pub lix_true: f64,
}

/// Scores each prediction against its pair's teacher text and summarizes.
/// Readability truth is the metric evaluated on the teacher text.
pub fn evaluate(
    pairs: &[crate::text::TextPair],
    predictions: &[String],
) -> Result<(MetricsReport, Vec<PerPairMetrics>), MetricsError> {
    if pairs.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch {
            left: pairs.len(),
            right: predictions.len(),
        });
    }
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_pair: Vec<PerPairMetrics> = pairs
        .iter()
        .zip(predictions)
        .map(|(pair, pred)| {
            let stats_pred = text_stats(pred);
            let stats_true = text_stats(&pair.teacher);
            PerPairMetrics {
                ed: edit_distance(pred, &pair.teacher) as f64,
                ned: normalized_ed(pred, &pair.teacher),
                fk_pred: flesch_kincaid(stats_pred),
                fk_true: flesch_kincaid(stats_true),
                lix_pred: lix(stats_pred),
                lix_true: lix(stats_true),
            }
        })
        .collect();

    let eds: Vec<f64> = per_pair.iter().map(|p| p.ed).collect();
    let neds: Vec<f64> = per_pair.iter().map(|p| p.ned).collect();
    let fk_errs: Vec<f64> = per_pair.iter().map(|p| (p.fk_pred - p.fk_true).abs()).collect();
    let lix_errs: Vec<f64> = per_pair.iter().map(|p| (p.lix_pred - p.lix_true).abs()).collect();

    let (mean_ed, median_ed, sem_ed) = summarize(&eds)?;
    let (mean_ned, median_ned, sem_ned) = summarize(&neds)?;
    let (fk_mae, _, fk_mae_sem) = summarize(&fk_errs)?;
    let (lix_mae, _, lix_mae_sem) = summarize(&lix_errs)?;

    Ok((
        MetricsReport {
            n: pairs.len(),
            mean_ed,
            sem_ed,
            median_ed,
            mean_ned,
            sem_ned,
            median_ned,
            fk_mae,
            fk_mae_sem,
            lix_mae,
            lix_mae_sem,
        },
        per_pair,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TextPair;
    use proptest::prelude::*;

    /// Textbook full-matrix DP, kept independent of the two-row version.
    pub(crate) fn edit_distance_reference(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            dp[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = (dp[i - 1][j] + 1)
                    .min(dp[i][j - 1] + 1)
                    .min(dp[i - 1][j - 1] + cost);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance_reference("kitten", "sitting"), 3);
        assert_eq!(edit_distance("same", "same"), 0);
        assert_eq!(edit_distance("", "abc"), 3);
    }

    #[test]
    fn normalized_ed_examples() {
        assert_eq!(normalized_ed("ab", ""), 1.0);
        assert!((normalized_ed("kitten", "sitting") - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(normalized_ed("", ""), 0.0);
    }

    proptest! {
        #[test]
        fn edit_distance_matches_reference(a in "\\PC{0,30}", b in "\\PC{0,30}") {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance_reference(&a, &b));
        }

        #[test]
        fn edit_distance_metric_axioms(a in "\\PC{0,20}", b in "\\PC{0,20}", c in "\\PC{0,20}") {
            let ab = edit_distance(&a, &b);
            let ba = edit_distance(&b, &a);
            prop_assert_eq!(ab, ba);
            prop_assert_eq!(edit_distance(&a, &a), 0);
            if ab == 0 {
                prop_assert_eq!(&a, &b);
            }
            let ac = edit_distance(&a, &c);
            let cb = edit_distance(&c, &b);
            prop_assert!(ab <= ac + cb);
        }

        #[test]
        fn ned_in_unit_interval(a in "\\PC{0,25}", b in "\\PC{0,25}") {
            let v = normalized_ed(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn text_stats_hand_counts() {
        let s = text_stats("We learn about Earth in Science.");
        assert_eq!(s, TextStats::new(6, 1, 8, 1));

        let s = text_stats("The dinosaur runs");
        assert_eq!(s, TextStats::new(3, 1, 5, 1));

        assert_eq!(text_stats(""), TextStats::new(0, 0, 0, 0));
    }

    #[test]
    fn sentence_runs_count_once() {
        let s = text_stats("Really?! Yes. Ok");
        assert_eq!(s.sentences, 2);
        // No terminator at all still counts one sentence for nonempty text.
        assert_eq!(text_stats("no punctuation here").sentences, 1);
    }

    #[test]
    fn word_stripping_keeps_internal_apostrophes() {
        let s = text_stats("don't \"quote\" me...");
        assert_eq!(s.words, 3);
        // don't = 2 vowel groups ('o', then no vowel in "n't"... 'o' only) -> 1
        // quote -> uo + e = 2, me -> 1
        assert_eq!(s.syllables, 1 + 2 + 1);
    }

    #[test]
    fn flesch_kincaid_hand_values() {
        let fk = flesch_kincaid(TextStats::new(6, 1, 8, 1));
        assert!((fk - (0.39 * 6.0 + 11.8 * (8.0 / 6.0) - 15.59)).abs() < 1e-12);
        assert!((fk - 2.483333).abs() < 1e-6);

        let fk = flesch_kincaid(TextStats::new(3, 1, 5, 1));
        assert!((fk - 5.246667).abs() < 1e-6);
    }

    #[test]
    fn flesch_kincaid_clips() {
        // 200 one-syllable words in one sentence -> raw 0.39*200 + 11.8 - 15.59 = 74.21
        let fk = flesch_kincaid(TextStats::new(200, 1, 200, 0));
        assert_eq!(fk, FK_CLIP.1);
        assert_eq!(flesch_kincaid(TextStats::new(0, 0, 0, 0)), FK_CLIP.0);
        // One-word one-syllable text sits below the lower clip raw (-3.4 < raw calc).
        let fk = flesch_kincaid(TextStats::new(1, 1, 1, 0));
        assert!(fk >= FK_CLIP.0 && fk <= FK_CLIP.1);
    }

    #[test]
    fn lix_hand_values() {
        let v = lix(TextStats::new(6, 1, 8, 1));
        assert!((v - (6.0 + 100.0 / 6.0)).abs() < 1e-12);
        assert!((v - 22.666667).abs() < 1e-6);

        let v = lix(TextStats::new(3, 1, 5, 1));
        assert!((v - 36.333333).abs() < 1e-6);
    }

    #[test]
    fn lix_clips() {
        // 120 words, 1 sentence, all long: raw 120 + 100 = 220 -> 110.
        assert_eq!(lix(TextStats::new(120, 1, 120, 120)), LIX_CLIP.1);
        assert_eq!(lix(TextStats::new(0, 0, 0, 0)), 0.0);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
        assert_eq!(
            mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(),
            mae(&[2.0, 2.0], &[1.0, 3.0]).unwrap()
        );
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn summarize_examples() {
        let (mean, median, sem) = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mean, 2.0);
        assert_eq!(median, 2.0);
        assert!((sem - 1.0 / 3.0f64.sqrt()).abs() < 1e-12);
        assert!((sem - 0.577350).abs() < 1e-6);

        assert_eq!(summarize(&[5.0]).unwrap(), (5.0, 5.0, 0.0));
        assert_eq!(summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap().1, 2.5);
        assert!(summarize(&[]).is_err());

        let (mean, median, sem) = summarize(&[4.2; 9]).unwrap();
        assert_eq!((mean, median, sem), (4.2, 4.2, 0.0));
    }

    #[test]
    fn evaluate_perfect_predictions() {
        let pairs = vec![
            TextPair::new("teh cat", "The cat sat."),
            TextPair::new("dgo", "A dog runs."),
        ];
        let preds: Vec<String> = pairs.iter().map(|p| p.teacher.clone()).collect();
        let (report, per_pair) = evaluate(&pairs, &preds).unwrap();
        assert_eq!(report.mean_ed, 0.0);
        assert_eq!(report.fk_mae, 0.0);
        assert_eq!(report.lix_mae, 0.0);
        assert_eq!(per_pair.len(), 2);
    }

    #[test]
    fn evaluate_matches_recomputation() {
        let pairs = vec![
            TextPair::new("a", "The cat sat."),
            TextPair::new("b", "Dogs bark loudly at night."),
            TextPair::new("c", "We learn about Earth in Science."),
        ];
        let preds = vec![
            "The cat sat.".to_string(),
            "Dogs bark at night.".to_string(),
            "We lern about Erth in Since.".to_string(),
        ];
        let (report, per_pair) = evaluate(&pairs, &preds).unwrap();

        // Independent recomputation from raw per-pair values.
        let eds: Vec<f64> = pairs
            .iter()
            .zip(&preds)
            .map(|(p, q)| edit_distance_reference(q, &p.teacher) as f64)
            .collect();
        let mean_ed = eds.iter().sum::<f64>() / eds.len() as f64;
        assert!((report.mean_ed - mean_ed).abs() < 1e-12);
        for (row, ed) in per_pair.iter().zip(&eds) {
            assert_eq!(row.ed, *ed);
        }
        let fk_mae = pairs
            .iter()
            .zip(&preds)
            .map(|(p, q)| (flesch_kincaid(text_stats(q)) - flesch_kincaid(text_stats(&p.teacher))).abs())
            .sum::<f64>()
            / 3.0;
        assert!((report.fk_mae - fk_mae).abs() < 1e-12);
    }

    #[test]
    fn evaluate_rejects_misaligned() {
        let pairs = vec![TextPair::new("a", "b")];
        assert!(evaluate(&pairs, &[]).is_err());
    }
}

//! Simulates student writing from clean conventional text: word and letter
//! deletions, word shortening, ending cuts, phonetic misspellings, and
//! missing inter-word spaces.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::text::TextPair;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("confusion table line {line}: expected \"key<TAB>replacement\"")]
    BadTableLine { line: usize },
    #[error("confusion table key {key:?} must be 1 or 2 lowercase characters")]
    BadTableKey { key: String },
    #[error("probability {name} = {value} outside [0,1]")]
    BadProbability { name: &'static str, value: f64 },
}

/// Letter/bigram confusion candidates. Bigram keys are matched before
/// letter keys, left to right, non-overlapping.
pub type ConfusionTable = BTreeMap<String, Vec<String>>;

/// Per-operation corruption frequencies.
#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub p_word_delete: f64,
    pub p_letter_delete: f64,
    pub p_shorten_to_initial: f64,
    pub p_cut_ending: f64,
    pub cut_ending_max_chars: usize,
    pub p_misspell: f64,
    pub p_space_delete: f64,
    pub confusion_table: ConfusionTable,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_word_delete: 0.03,
            p_letter_delete: 0.03,
            p_shorten_to_initial: 0.03,
            p_cut_ending: 0.10,
            cut_ending_max_chars: 3,
            p_misspell: 0.10,
            p_space_delete: 0.05,
            confusion_table: default_confusion_table(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero, empty table: corruption becomes the identity.
    pub fn zero(seed: u64) -> Self {
        AugmentConfig {
            p_word_delete: 0.0,
            p_letter_delete: 0.0,
            p_shorten_to_initial: 0.0,
            p_cut_ending: 0.0,
            cut_ending_max_chars: 1,
            p_misspell: 0.0,
            p_space_delete: 0.0,
            confusion_table: ConfusionTable::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let probs = [
            ("p_word_delete", self.p_word_delete),
            ("p_letter_delete", self.p_letter_delete),
            ("p_shorten_to_initial", self.p_shorten_to_initial),
            ("p_cut_ending", self.p_cut_ending),
            ("p_misspell", self.p_misspell),
            ("p_space_delete", self.p_space_delete),
        ];
        for (name, value) in probs {
            if !(0.0..=1.0).contains(&value) {
                return Err(AugmentError::BadProbability { name, value });
            }
        }
        for key in self.confusion_table.keys() {
            check_key(key)?;
        }
        Ok(())
    }
}

fn check_key(key: &str) -> Result<(), AugmentError> {
    let n = key.chars().count();
    if n == 0 || n > 2 || key.chars().any(|c| c.is_uppercase()) {
        return Err(AugmentError::BadTableKey { key: key.to_string() });
    }
    Ok(())
}

/// Parses a two-column "key<TAB>replacement" table; repeated keys append
/// candidates. Blank lines and `#` comments are skipped.
pub fn parse_confusion_table(text: &str) -> Result<ConfusionTable, AugmentError> {
    let mut table = ConfusionTable::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, replacement) = line
            .split_once('\t')
            .ok_or(AugmentError::BadTableLine { line: i + 1 })?;
        check_key(key)?;
        table
            .entry(key.to_string())
            .or_default()
            .push(replacement.to_string());
    }
    Ok(table)
}

/// The table shipped with the toolkit: common letter and bigram confusions
/// of early phonetic spelling.
pub fn default_confusion_table() -> ConfusionTable {
    parse_confusion_table(include_str!("../data/confusions.tsv"))
        .expect("bundled confusion table parses")
}

/// Corrupts a single whitespace-free word. At most one structural operation
/// (shorten-to-initial, else ending cut) applies, then per-unit misspelling
/// substitutions, then per-letter deletions. Never returns an empty string:
/// falls back to the word's first letter.
pub fn corrupt_word(word: &str, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> String {
    debug_assert!(!word.is_empty() && !word.contains(char::is_whitespace));
    let chars: Vec<char> = word.chars().collect();

    let mut work: Vec<char> = if rng.random_bool(config.p_shorten_to_initial) {
        vec![chars[0]]
    } else if chars.len() >= 4 && rng.random_bool(config.p_cut_ending) {
        let max_cut = config.cut_ending_max_chars.min(chars.len() - 1);
        let cut = rng.random_range(1..=max_cut);
        chars[..chars.len() - cut].to_vec()
    } else {
        chars.clone()
    };

    // Misspelling pass, bigram keys first, left to right.
    if !config.confusion_table.is_empty() && config.p_misspell > 0.0 {
        let mut result: Vec<char> = Vec::with_capacity(work.len());
        let mut i = 0;
        while i < work.len() {
            if i + 1 < work.len() {
                let bigram: String = work[i..i + 2]
                    .iter()
                    .flat_map(|c| c.to_lowercase())
                    .collect();
                if let Some(cands) = config.confusion_table.get(&bigram) {
                    if rng.random_bool(config.p_misspell) {
                        let pick = &cands[rng.random_range(0..cands.len())];
                        result.extend(pick.chars());
                        i += 2;
                        continue;
                    }
                }
            }
            let letter: String = work[i].to_lowercase().collect();
            if let Some(cands) = config.confusion_table.get(&letter) {
                if rng.random_bool(config.p_misspell) {
                    let pick = &cands[rng.random_range(0..cands.len())];
                    result.extend(pick.chars());
                    i += 1;
                    continue;
                }
            }
            result.push(work[i]);
            i += 1;
        }
        work = result;
    }

    if config.p_letter_delete > 0.0 {
        work.retain(|_| !rng.random_bool(config.p_letter_delete));
    }

    if work.is_empty() {
        work.push(chars[0]);
    }
    work.into_iter().collect()
}

/// Corrupts whitespace-separated text: deletes words, corrupts survivors,
/// and drops inter-word spaces. At least one word survives nonempty input.
pub fn corrupt_text(text: &str, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    if words.is_empty() {
        return String::new();
    }

    let mut kept: Vec<usize> = Vec::with_capacity(words.len());
    for i in 0..words.len() {
        if !rng.random_bool(config.p_word_delete) {
            kept.push(i);
        }
    }
    if kept.is_empty() {
        kept.push(rng.random_range(0..words.len()));
    }

    let corrupted: Vec<String> = kept
        .iter()
        .map(|&i| corrupt_word(words[i], config, rng))
        .collect();

    let mut out = String::new();
    for (k, word) in corrupted.iter().enumerate() {
        if k > 0 && !rng.random_bool(config.p_space_delete) {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// One synthetic pair per clean text: teacher is the input, student is the
/// corruption. Each text gets its own rng stream derived from
/// (config.seed, index), so output is independent of evaluation order.
pub fn generate_pairs(clean_texts: &[String], config: &AugmentConfig) -> Vec<TextPair> {
    clean_texts
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, i as u64));
            TextPair::new(corrupt_text(text, config, &mut rng), text.clone())
        })
        .collect()
}

/// splitmix64-style mixer for deriving per-item rng streams.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Character vocabulary, tokenization, pair-dataset I/O, splitting, and
//! synthetic pair-noise injection.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("line {line}: {source}")]
    PairParse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("split ratios must be positive and sum to 1 (got sum {sum})")]
    BadRatios { sum: f64 },
    #[error("noise rate {rate} requires at least 2 pairs, got {n}")]
    TooFewPairsForNoise { rate: f64, n: usize },
    #[error("noise rate must lie in [0,1], got {0}")]
    BadNoiseRate(f64),
}

/// One student text and its conventional teacher text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPair {
    pub student: String,
    pub teacher: String,
    /// Diagnostic flag set by noise injection; never read by training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy: Option<bool>,
}

impl TextPair {
    pub fn new(student: impl Into<String>, teacher: impl Into<String>) -> Self {
        TextPair {
            student: student.into(),
            teacher: teacher.into(),
            noisy: None,
        }
    }
}

/// Encoded token-id sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Character-level vocabulary with four special tokens at fixed ids.
///
/// Ids are contiguous: 0..4 are PAD/BOS/EOS/UNK, then every distinct corpus
/// character sorted by Unicode code point. Construction is therefore
/// independent of corpus order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    map: BTreeMap<char, u32>,
    chars: Vec<char>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    /// Non-special characters in id order.
    chars: String,
}

impl Vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const UNK: u32 = 3;
    pub const NUM_SPECIALS: u32 = 4;

    /// Builds a vocabulary from every distinct character in `corpus`.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>) -> Vocab {
        let mut set: Vec<char> = corpus
            .into_iter()
            .flat_map(|t| t.as_ref().chars().collect::<Vec<_>>())
            .collect();
        set.sort_unstable();
        set.dedup();
        Vocab::from_chars(set)
    }

    fn from_chars(chars: Vec<char>) -> Vocab {
        let map = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, Self::NUM_SPECIALS + i as u32))
            .collect();
        Vocab { map, chars }
    }

    /// Vocabulary size K, specials included.
    pub fn size(&self) -> usize {
        self.chars.len() + Self::NUM_SPECIALS as usize
    }

    pub fn id_of(&self, c: char) -> u32 {
        self.map.get(&c).copied().unwrap_or(Self::UNK)
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        if id < Self::NUM_SPECIALS {
            None
        } else {
            self.chars.get((id - Self::NUM_SPECIALS) as usize).copied()
        }
    }

    /// Encodes text; characters outside the vocabulary map to UNK.
    pub fn encode(&self, text: &str) -> TokenSeq {
        TokenSeq(text.chars().map(|c| self.id_of(c)).collect())
    }

    /// Decodes a sequence, dropping special tokens.
    pub fn decode(&self, seq: &TokenSeq) -> String {
        seq.0.iter().filter_map(|&id| self.char_of(id)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            chars: self.chars.iter().collect(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Vocab, serde_json::Error> {
        let f: VocabFile = serde_json::from_str(s)?;
        Ok(Vocab::from_chars(f.chars.chars().collect()))
    }
}

/// Train/validation/test partition of a pair dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<TextPair>,
    pub validation: Vec<TextPair>,
    pub test: Vec<TextPair>,
    pub seed: u64,
}

/// Loads a JSON-lines pair file. Blank lines are not allowed; errors carry
/// the 1-based line number.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<TextPair>, TextError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let pair = serde_json::from_str(&line)
            .map_err(|source| TextError::PairParse { line: i + 1, source })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Writes pairs as JSON-lines, one object per line, order preserved.
pub fn save_pairs(pairs: &[TextPair], path: impl AsRef<Path>) -> Result<(), TextError> {
    let path = path.as_ref();
    let io_err = |source| TextError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for pair in pairs {
        let line = serde_json::to_string(pair).expect("pair serializes");
        writeln!(out, "{line}").map_err(|source| TextError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    out.flush().map_err(|source| TextError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Shuffles deterministically and partitions. Validation and test get
/// `floor(ratio * N)` pairs each; train takes the rounding remainder.
pub fn split_dataset(
    pairs: &[TextPair],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetSplit, TextError> {
    let (r_train, r_val, r_test) = ratios;
    let sum = r_train + r_val + r_test;
    if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 || (sum - 1.0).abs() > 1e-9 {
        return Err(TextError::BadRatios { sum });
    }
    let n = pairs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);

    let n_val = (r_val * n as f64).floor() as usize;
    let n_test = (r_test * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;

    let take = |slice: &[usize]| slice.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: take(&idx[..n_train]),
        validation: take(&idx[n_train..n_train + n_val]),
        test: take(&idx[n_train + n_val..]),
        seed,
    })
}

/// Replaces the teacher of `ceil(rate * N)` pairs with the teacher of a
/// different pair, marking replaced pairs `noisy = true`.
///
/// For two or more selected pairs the replacement is a seeded single-cycle
/// permutation of the selected teachers (always a derangement); a single
/// selected pair takes the teacher of a random other pair.
pub fn inject_pair_noise(
    pairs: &[TextPair],
    rate: f64,
    seed: u64,
) -> Result<Vec<TextPair>, TextError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(TextError::BadNoiseRate(rate));
    }
    let n = pairs.len();
    if rate == 0.0 {
        return Ok(pairs.to_vec());
    }
    if n < 2 {
        return Err(TextError::TooFewPairsForNoise { rate, n });
    }
    let m = (rate * n as f64).ceil() as usize;
    let mut out = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let selected = &idx[..m];

    if m == 1 {
        let target = selected[0];
        let mut donor = rng.random_range(0..n - 1);
        if donor >= target {
            donor += 1;
        }
        out[target].teacher = pairs[donor].teacher.clone();
        out[target].noisy = Some(true);
    } else {
        // Cycle the selected teachers: pair i takes the teacher of the next
        // selected pair, so no selected pair keeps its own.
        for (k, &i) in selected.iter().enumerate() {
            let donor = selected[(k + 1) % m];
            out[i].teacher = pairs[donor].teacher.clone();
            out[i].noisy = Some(true);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_vocab_examples() {
        let v = Vocab::build(["ab"]);
        assert_eq!(v.size(), 6);
        assert_eq!(v.id_of('a'), 4);
        assert_eq!(v.id_of('b'), 5);

        let empty = Vocab::build(Vec::<String>::new());
        assert_eq!(empty.size(), 4);

        // Set semantics: corpus order and duplication are irrelevant.
        assert_eq!(Vocab::build(["ba", "ab"]), Vocab::build(["ab"]));
    }

    #[test]
    fn specials_are_distinct_and_present() {
        let ids = [Vocab::PAD, Vocab::BOS, Vocab::EOS, Vocab::UNK];
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert_eq!(Vocab::NUM_SPECIALS, 4);
    }

    #[test]
    fn encode_known_and_unknown() {
        let v = Vocab::build(["ab"]);
        assert_eq!(v.encode("ab").0, vec![4, 5]);
        assert_eq!(v.encode("aZ").0, vec![4, Vocab::UNK]);
    }

    #[test]
    fn decode_drops_specials() {
        let v = Vocab::build(["ab"]);
        let seq = TokenSeq(vec![Vocab::BOS, 4, 5, Vocab::EOS]);
        assert_eq!(v.decode(&seq), "ab");
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = Vocab::build(["hello, world!"]);
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(s in "[a-z ?!.]{0,40}") {
            let v = Vocab::build([s.as_str()]);
            prop_assert_eq!(v.decode(&v.encode(&s)), s);
        }
    }

    #[test]
    fn load_pairs_parses_object_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        std::fs::write(
            &path,
            "{\"student\":\"thedinousouisrune\",\"teacher\":\"The dinosaur runs\"}\n",
        )
        .unwrap();
        let pairs = load_pairs(&path).unwrap();
        assert_eq!(pairs, vec![TextPair::new("thedinousouisrune", "The dinosaur runs")]);
    }

    #[test]
    fn load_pairs_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert_eq!(load_pairs(&path).unwrap(), Vec::new());
    }

    #[test]
    fn load_pairs_errors_carry_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"student\":\"a\",\"teacher\":\"b\"}\nnot json\n").unwrap();
        let err = load_pairs(&path).unwrap_err();
        assert!(matches!(err, TextError::PairParse { line: 2, .. }), "{err}");
    }

    #[test]
    fn load_pairs_missing_field_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.jsonl");
        std::fs::write(&path, "{\"student\":\"a\"}\n").unwrap();
        let err = load_pairs(&path).unwrap_err().to_string();
        assert!(err.contains("teacher"), "{err}");
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<TextPair> = (0..50)
            .map(|i| {
                let mut p = TextPair::new(format!("student {i}"), format!("teacher {i}"));
                if rng.random_bool(0.3) {
                    p.noisy = Some(true);
                }
                p
            })
            .collect();
        save_pairs(&pairs, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
    }

    fn dummy_pairs(n: usize) -> Vec<TextPair> {
        (0..n)
            .map(|i| TextPair::new(format!("s{i}"), format!("t{i}")))
            .collect()
    }

    #[test]
    fn split_exact_ratios() {
        let split = split_dataset(&dummy_pairs(10), (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (8, 1, 1)
        );
    }

    #[test]
    fn split_is_deterministic() {
        let pairs = dummy_pairs(37);
        let a = split_dataset(&pairs, (0.8, 0.1, 0.1), 11).unwrap();
        let b = split_dataset(&pairs, (0.8, 0.1, 0.1), 11).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn split_sizes_at_dataset_scale() {
        // floor(0.1 * 36610) = 3661 for val and test, remainder to train.
        let split = split_dataset(&dummy_pairs(36_610), (0.8, 0.1, 0.1), 0).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (29_288, 3661, 3661)
        );
    }

    #[test]
    fn split_partitions_input() {
        let pairs = dummy_pairs(43);
        let split = split_dataset(&pairs, (0.5, 0.25, 0.25), 5).unwrap();
        let mut all: Vec<String> = split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
            .map(|p| p.student.clone())
            .collect();
        all.sort();
        let mut expect: Vec<String> = pairs.iter().map(|p| p.student.clone()).collect();
        expect.sort();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        assert!(split_dataset(&dummy_pairs(4), (0.8, 0.1, 0.2), 0).is_err());
        assert!(split_dataset(&dummy_pairs(4), (1.0, -0.1, 0.1), 0).is_err());
    }

    #[test]
    fn noise_rate_zero_is_identity() {
        let pairs = dummy_pairs(5);
        assert_eq!(inject_pair_noise(&pairs, 0.0, 9).unwrap(), pairs);
    }

    #[test]
    fn noise_rate_one_is_a_derangement() {
        let pairs = dummy_pairs(12);
        let out = inject_pair_noise(&pairs, 1.0, 4).unwrap();
        for (orig, noisy) in pairs.iter().zip(&out) {
            assert_ne!(orig.teacher, noisy.teacher);
            assert_eq!(noisy.noisy, Some(true));
        }
    }

    #[test]
    fn noise_quarter_of_four_replaces_exactly_one() {
        let pairs = dummy_pairs(4);
        for seed in 0..20 {
            let out = inject_pair_noise(&pairs, 0.25, seed).unwrap();
            let changed = out
                .iter()
                .zip(&pairs)
                .filter(|(a, b)| a.teacher != b.teacher)
                .count();
            assert_eq!(changed, 1, "seed {seed}");
        }
    }

    #[test]
    fn noise_changes_exactly_ceil_rate_n() {
        let pairs = dummy_pairs(10);
        let out = inject_pair_noise(&pairs, 0.25, 2).unwrap();
        let changed = out
            .iter()
            .zip(&pairs)
            .filter(|(a, b)| a.teacher != b.teacher)
            .count();
        assert_eq!(changed, 3); // ceil(0.25 * 10)
        for (a, b) in out.iter().zip(&pairs) {
            if a.teacher != b.teacher {
                assert_eq!(a.noisy, Some(true));
                // Teacher must come from some other pair.
                assert!(pairs.iter().any(|p| p.teacher == a.teacher));
            }
        }
    }

    #[test]
    fn noise_rejects_single_pair() {
        let err = inject_pair_noise(&dummy_pairs(1), 0.5, 0).unwrap_err();
        assert!(matches!(err, TextError::TooFewPairsForNoise { .. }));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let pairs = dummy_pairs(9);
        let a = inject_pair_noise(&pairs, 0.5, 31).unwrap();
        let b = inject_pair_noise(&pairs, 0.5, 31).unwrap();
        assert_eq!(a, b);
        let c = inject_pair_noise(&pairs, 0.5, 32).unwrap();
        assert_ne!(a, c);
    }
}

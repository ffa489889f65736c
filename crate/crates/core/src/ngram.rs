//! Smoothed n-gram language model over the same token space as the
//! sequence model, used by the robust likelihood and for standalone scoring.
//!
//! Smoothing is recursive interpolation with a constant k:
//! p_m(w|h) = (c(h,w) + k * p_{m-1}(w|h')) / (c(h) + k), base p_0(w) = 1/K,
//! where h' drops the oldest history token. Each order normalizes exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::text::{TokenSeq, Vocab};

pub const LM_MAGIC: &[u8; 4] = b"NGLM";
pub const LM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("order must be >= 1, got {0}")]
    BadOrder(usize),
    #[error("smoothing constant must be positive, got {0}")]
    BadSmoothing(f64),
    #[error("sequence must end with EOS")]
    MissingEos,
    #[error("token id {id} out of range for vocab size {k}")]
    TokenOutOfRange { id: u32, k: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an n-gram model file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated")]
    Truncated,
}

/// Count tables for one n-gram order: (history ++ [word]) -> count and
/// history -> total count.
#[derive(Clone, Debug, Default, PartialEq)]
struct OrderCounts {
    grams: BTreeMap<Vec<u32>, u64>,
    totals: BTreeMap<Vec<u32>, u64>,
}

/// Immutable fitted model; safe to score from concurrently.
#[derive(Clone, Debug, PartialEq)]
pub struct NGramModel {
    order: usize,
    k: f64,
    vocab_size: usize,
    orders: Vec<OrderCounts>,
}

impl NGramModel {
    /// Accumulates counts for all orders 1..=order over every position of
    /// every sequence, EOS included. Histories are start-padded so position 0
    /// is well-defined at every order; the pad marker is the id `vocab_size`,
    /// one past the vocabulary, so it can never collide with a real token.
    pub fn fit(
        sequences: &[TokenSeq],
        order: usize,
        k: f64,
        vocab_size: usize,
    ) -> Result<NGramModel, NgramError> {
        if order < 1 {
            return Err(NgramError::BadOrder(order));
        }
        if k <= 0.0 {
            return Err(NgramError::BadSmoothing(k));
        }
        let mut orders = vec![OrderCounts::default(); order];
        for seq in sequences {
            let mut padded = vec![vocab_size as u32; order - 1];
            padded.extend_from_slice(seq.as_slice());
            for pos in (order - 1)..padded.len() {
                let word = padded[pos];
                if word as usize >= vocab_size {
                    return Err(NgramError::TokenOutOfRange {
                        id: word,
                        k: vocab_size,
                    });
                }
                for (m, table) in orders.iter_mut().enumerate() {
                    let hist = &padded[pos - m..pos];
                    let mut key = hist.to_vec();
                    key.push(word);
                    *table.grams.entry(key).or_insert(0) += 1;
                    *table.totals.entry(hist.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(NGramModel {
            order,
            k,
            vocab_size,
            orders,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Natural-log probability of `token` after `history`. Uses the last
    /// order-1 history tokens; shorter histories are start-padded on the left.
    pub fn log_prob_token(&self, token: u32, history: &[u32]) -> f64 {
        self.prob_token(token, history).ln()
    }

    fn prob_token(&self, token: u32, history: &[u32]) -> f64 {
        let need = self.order - 1;
        let mut hist = Vec::with_capacity(need);
        if history.len() < need {
            hist.extend(std::iter::repeat_n(self.vocab_size as u32, need - history.len()));
            hist.extend_from_slice(history);
        } else {
            hist.extend_from_slice(&history[history.len() - need..]);
        }

        // p_0 = uniform, then climb the orders re-using ever longer suffixes.
        let mut p = 1.0 / self.vocab_size as f64;
        for m in 0..self.order {
            let table = &self.orders[m];
            let h = &hist[hist.len() - m..];
            let mut key = h.to_vec();
            key.push(token);
            let c_hw = table.grams.get(&key).copied().unwrap_or(0) as f64;
            let c_h = table.totals.get(h).copied().unwrap_or(0) as f64;
            p = (c_hw + self.k * p) / (c_h + self.k);
        }
        p
    }

    /// Sum of per-token log probabilities over the whole sequence,
    /// terminal EOS included.
    pub fn log_prob_seq(&self, seq: &TokenSeq) -> Result<f64, NgramError> {
        if seq.as_slice().last() != Some(&Vocab::EOS) {
            return Err(NgramError::MissingEos);
        }
        let tokens = seq.as_slice();
        let mut total = 0.0;
        for (i, &tok) in tokens.iter().enumerate() {
            total += self.log_prob_token(tok, &tokens[..i]);
        }
        Ok(total)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NgramError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(LM_MAGIC)?;
        w.write_all(&LM_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        w.write_all(&self.k.to_le_bytes())?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        for (m, table) in self.orders.iter().enumerate() {
            w.write_all(&(table.grams.len() as u64).to_le_bytes())?;
            for (key, &count) in &table.grams {
                debug_assert_eq!(key.len(), m + 1);
                for &tok in key {
                    w.write_all(&tok.to_le_bytes())?;
                }
                w.write_all(&count.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NGramModel, NgramError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != LM_MAGIC {
            return Err(NgramError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != LM_FORMAT_VERSION {
            return Err(NgramError::Version(version));
        }
        let order = read_u32(&mut r)? as usize;
        if order < 1 {
            return Err(NgramError::BadOrder(order));
        }
        let k = {
            let mut buf = [0u8; 8];
            read_exact(&mut r, &mut buf)?;
            f64::from_le_bytes(buf)
        };
        let vocab_size = read_u32(&mut r)? as usize;
        let mut orders = Vec::with_capacity(order);
        for m in 0..order {
            let n = {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf)?;
                u64::from_le_bytes(buf)
            };
            let mut table = OrderCounts::default();
            for _ in 0..n {
                let mut key = Vec::with_capacity(m + 1);
                for _ in 0..=m {
                    key.push(read_u32(&mut r)?);
                }
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf)?;
                let count = u64::from_le_bytes(buf);
                let hist = key[..m].to_vec();
                *table.totals.entry(hist).or_insert(0) += count;
                table.grams.insert(key, count);
            }
            orders.push(table);
        }
        Ok(NGramModel {
            order,
            k,
            vocab_size,
            orders,
        })
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), NgramError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NgramError::Truncated
        } else {
            NgramError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, NgramError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

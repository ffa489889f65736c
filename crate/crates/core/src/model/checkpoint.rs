//! Versioned binary checkpoints: magic "SQ2Q", format version, config, then
//! named tensors as little-endian f32 with explicit shapes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

use super::{Layout, ModelConfig, ModelParams};

pub const CKPT_MAGIC: &[u8; 4] = b"SQ2Q";
pub const CKPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    Version(u32),
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {index}: expected name {expected}, found {found}")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_FORMAT_VERSION.to_le_bytes())?;
    for v in [
        cfg.d_model,
        cfg.n_heads,
        cfg.n_encoder_layers,
        cfg.n_decoder_layers,
        cfg.d_ffn,
        cfg.max_seq_len,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.dropout_rate.to_le_bytes())?;
    w.write_all(&(cfg.vocab_size as u32).to_le_bytes())?;

    w.write_all(&(params.tensors.len() as u32).to_le_bytes())?;
    for (i, tensor) in params.tensors.iter().enumerate() {
        let name = layout.name(i).as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(tensor.shape().len() as u8).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let d_model = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let n_encoder_layers = read_u32(&mut r)? as usize;
    let n_decoder_layers = read_u32(&mut r)? as usize;
    let d_ffn = read_u32(&mut r)? as usize;
    let max_seq_len = read_u32(&mut r)? as usize;
    let dropout_rate = {
        let mut buf = [0u8; 4];
        read_exact(&mut r, &mut buf)?;
        f32::from_le_bytes(buf)
    };
    let vocab_size = read_u32(&mut r)? as usize;
    let config = ModelConfig {
        d_model,
        n_heads,
        n_encoder_layers,
        n_decoder_layers,
        d_ffn,
        max_seq_len,
        dropout_rate,
        vocab_size,
    };
    let layout = Layout::new(&config);

    let n_tensors = read_u32(&mut r)? as usize;
    if n_tensors != layout.len() {
        return Err(CheckpointError::TensorCount {
            expected: layout.len(),
            found: n_tensors,
        });
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let name_len = {
            let mut buf = [0u8; 2];
            read_exact(&mut r, &mut buf)?;
            u16::from_le_bytes(buf) as usize
        };
        let mut name_buf = vec![0u8; name_len];
        read_exact(&mut r, &mut name_buf)?;
        let name = String::from_utf8_lossy(&name_buf).into_owned();
        if name != layout.name(i) {
            return Err(CheckpointError::NameMismatch {
                index: i,
                expected: layout.name(i).to_string(),
                found: name,
            });
        }
        let ndim = {
            let mut buf = [0u8; 1];
            read_exact(&mut r, &mut buf)?;
            buf[0] as usize
        };
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != layout.shape(i) {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: layout.shape(i).to_vec(),
                found: shape,
            });
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read_exact(&mut r, &mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push(Tensor::from_vec(&shape, data));
    }
    Ok(ModelParams { config, tensors })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

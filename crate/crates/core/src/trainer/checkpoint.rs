//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TQDQN1" | version u32 | tensor count u32
//! per tensor: name length u32 | name | rank u32 | dims u32 * rank | f32 * product(dims)
//! global step u64 | rng state u64 * (rest / 8)
//! ```
//!
//! Besides the network tensors a checkpoint holds `adam.m.<name>`,
//! `adam.v.<name>`, the scalar `adam.step` and `encoder.config`, a vector
//! describing the encoder layout.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::encoder::{EncoderConfig, EncoderError, EncoderKind, Pooling, QNetwork};
use crate::numerics::{AdamState, Tensor};

pub const MAGIC: &[u8; 6] = b"TQDQN1";
pub const VERSION: u32 = 1;

const ADAM_STEP: &str = "adam.step";
const ENCODER_CONFIG: &str = "encoder.config";
/// Largest integer every f32 represents exactly.
const F32_EXACT: u64 = 1 << 24;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit: {0}")]
    Shape(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<EncoderError> for CheckpointError {
    fn from(e: EncoderError) -> Self {
        CheckpointError::Shape(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub global_step: u64,
    pub rng_words: Vec<u64>,
}

fn encode_config(cfg: &EncoderConfig) -> Vec<f32> {
    let mut v = vec![
        match cfg.kind {
            EncoderKind::Cnn => 0.0,
            EncoderKind::Lstm => 1.0,
        },
        match cfg.pooling {
            Pooling::Max => 0.0,
            Pooling::Mean => 1.0,
        },
        f32::from(u8::from(cfg.position_embeddings)),
        f32::from(u8::from(cfg.head_relu)),
        cfg.embed_dim as f32,
        cfg.filters_per_size as f32,
        cfg.token_cap as f32,
        cfg.lstm_hidden as f32,
        cfg.kernel_sizes.len() as f32,
    ];
    v.extend(cfg.kernel_sizes.iter().map(|&k| k as f32));
    v
}

fn decode_config(v: &[f32]) -> Result<EncoderConfig, CheckpointError> {
    let bad = || CheckpointError::Corrupt("malformed encoder.config".into());
    let int = |x: f32| -> Result<usize, CheckpointError> {
        if x >= 0.0 && x.fract() == 0.0 && (x as u64) < F32_EXACT {
            Ok(x as usize)
        } else {
            Err(bad())
        }
    };
    if v.len() < 9 {
        return Err(bad());
    }
    let n = int(v[8])?;
    if v.len() != 9 + n {
        return Err(bad());
    }
    let flag = |x: f32| match int(x)? {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(bad()),
    };
    let cfg = EncoderConfig {
        kind: if flag(v[0])? { EncoderKind::Lstm } else { EncoderKind::Cnn },
        pooling: if flag(v[1])? { Pooling::Mean } else { Pooling::Max },
        position_embeddings: flag(v[2])?,
        head_relu: flag(v[3])?,
        embed_dim: int(v[4])?,
        filters_per_size: int(v[5])?,
        token_cap: int(v[6])?,
        lstm_hidden: int(v[7])?,
        kernel_sizes: v[9..].iter().map(|&k| int(k)).collect::<Result<_, _>>()?,
        ..EncoderConfig::default()
    };
    cfg.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    Ok(cfg)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Snapshot of a network, its optimiser, the step and the action RNG.
    pub fn capture(net: &QNetwork<f32>, adam: &AdamState<f32>, global_step: u64, rng_words: Vec<u64>) -> Result<Self, CheckpointError> {
        if adam.step_count() >= F32_EXACT {
            return Err(CheckpointError::Unsupported(format!(
                "optimiser step {} cannot be stored exactly",
                adam.step_count()
            )));
        }
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        tensors.push((ENCODER_CONFIG.into(), Tensor::vector(encode_config(net.config()))));
        for (_, name, t) in net.params().iter() {
            tensors.push((name.to_string(), t.clone()));
        }
        for ((_, name, _), (m, v)) in net.params().iter().zip(adam.first_moments().iter().zip(adam.second_moments())) {
            tensors.push((format!("adam.m.{name}"), m.clone()));
            tensors.push((format!("adam.v.{name}"), v.clone()));
        }
        tensors.push((ADAM_STEP.into(), Tensor::scalar(adam.step_count() as f32)));
        Ok(Self {
            tensors,
            global_step,
            rng_words,
        })
    }

    fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig, CheckpointError> {
        let t = self
            .tensor(ENCODER_CONFIG)
            .ok_or_else(|| CheckpointError::Corrupt("missing encoder.config".into()))?;
        decode_config(t.data())
    }

    fn dims(&self) -> Result<(usize, usize), CheckpointError> {
        let word = self
            .tensor("embed.word")
            .ok_or_else(|| CheckpointError::Corrupt("missing embed.word".into()))?;
        let bias = self
            .tensor("head.bias")
            .ok_or_else(|| CheckpointError::Corrupt("missing head.bias".into()))?;
        Ok((word.shape()[0], bias.len()))
    }

    pub fn vocab_size(&self) -> Result<usize, CheckpointError> {
        Ok(self.dims()?.0)
    }

    pub fn num_actions(&self) -> Result<usize, CheckpointError> {
        Ok(self.dims()?.1)
    }

    /// Fail unless the checkpoint was trained for this vocabulary and
    /// action catalog.
    pub fn check_compatible(&self, vocab_size: usize, num_actions: usize) -> Result<(), CheckpointError> {
        let (v, a) = self.dims()?;
        if v != vocab_size {
            return Err(CheckpointError::Shape(format!("vocabulary of {v} tokens, game has {vocab_size}")));
        }
        if a != num_actions {
            return Err(CheckpointError::Shape(format!("{a} actions, game has {num_actions}")));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<QNetwork<f32>, CheckpointError> {
        let cfg = self.encoder_config()?;
        let (vocab, actions) = self.dims()?;
        let tensors: BTreeMap<String, Tensor<f32>> = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam.") && n != ENCODER_CONFIG)
            .cloned()
            .collect();
        Ok(QNetwork::from_params(cfg, vocab, actions, tensors)?)
    }

    pub fn adam(&self, net: &QNetwork<f32>) -> Result<AdamState<f32>, CheckpointError> {
        let step = self
            .tensor(ADAM_STEP)
            .filter(|t| t.is_scalar())
            .ok_or_else(|| CheckpointError::Corrupt("missing adam.step".into()))?
            .data()[0];
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(CheckpointError::Corrupt(format!("adam.step {step}")));
        }
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (_, name, t) in net.params().iter() {
            for (prefix, out) in [("adam.m.", &mut first), ("adam.v.", &mut second)] {
                let key = format!("{prefix}{name}");
                let m = self.tensor(&key).ok_or_else(|| CheckpointError::Corrupt(format!("missing {key}")))?;
                if m.shape() != t.shape() {
                    return Err(CheckpointError::Shape(format!("{key} has shape {:?}, expected {:?}", m.shape(), t.shape())));
                }
                out.push(m.clone());
            }
        }
        AdamState::from_parts(step as u64, first, second).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.global_step.to_le_bytes());
        for w in &self.rng_words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf, at: 0 };
        if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name} is too large")))?;
            let data = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t: Tensor<f32> = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if t.data().iter().any(|x| !x.is_finite()) {
                return Err(CheckpointError::Corrupt(format!("tensor {name} holds a non-finite value")));
            }
            tensors.push((name, t));
        }
        let global_step = r.u64()?;
        let rest = &buf[r.at..];
        if !rest.len().is_multiple_of(8) {
            return Err(CheckpointError::Truncated(buf.len()));
        }
        let rng_words = rest
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            tensors,
            global_step,
            rng_words,
        })
    }

    /// Write to `path` through a temporary file in the same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write `bytes` to a sibling temporary file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> QNetwork<f32> {
        let cfg = EncoderConfig {
            embed_dim: 4,
            kernel_sizes: vec![2, 3],
            filters_per_size: 3,
            token_cap: 16,
            ..EncoderConfig::default()
        };
        QNetwork::new(cfg, 9, 4, 1).unwrap()
    }

    fn ckpt() -> Checkpoint {
        let net = small();
        let adam = AdamState::new(net.params());
        Checkpoint::capture(&net, &adam, 1234, vec![1, 2, 3, u64::MAX]).unwrap()
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..6], b"TQDQN1");
    }

    #[test]
    fn restored_network_matches() {
        let net = small();
        let c = ckpt();
        let back = c.network().unwrap();
        assert_eq!(back, net);
        assert_eq!(c.adam(&back).unwrap().step_count(), 0);
        assert_eq!(c.encoder_config().unwrap(), *net.config());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = ckpt().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(CheckpointError::Truncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        assert!(matches!(Checkpoint::from_bytes(b"TQD"), Err(CheckpointError::BadMagic)));
        let mut bad = bytes;
        bad[6] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Version(9))));
    }

    #[test]
    fn non_finite_payload_is_corrupt() {
        let mut c = ckpt();
        c.tensors[0].1.data_mut()[0] = f32::NAN;
        assert!(matches!(Checkpoint::from_bytes(&c.to_bytes()), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn incompatible_catalog_is_a_shape_error() {
        let c = ckpt();
        assert!(c.check_compatible(9, 4).is_ok());
        assert!(matches!(c.check_compatible(9, 21), Err(CheckpointError::Shape(_))));
        assert!(matches!(c.check_compatible(10, 4), Err(CheckpointError::Shape(_))));
    }
}

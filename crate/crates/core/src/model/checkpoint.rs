//! Binary checkpoint: `b"SHDW"`, format version (`u32` LE), JSON header
//! length (`u64` LE), JSON header, then every tensor as raw little-endian
//! `f32` at the byte offset listed in the header's tensor directory.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{init_params, ArchConfig, ModelParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SHDW";
pub const CHECKPOINT_VERSION: u32 = 1;

const VELOCITY_PREFIX: &str = "velocity/";

/// Model parameters plus the optimizer state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Momentum buffers in [`ModelParams::named_tensors`] order.
    pub velocity: Option<Vec<Tensor>>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    step: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: u64,
}

fn corrupt(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            velocity: None,
            step: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = self.params.named_tensors();
        if let Some(velocity) = &self.velocity {
            if velocity.len() != tensors.len() {
                return Err(corrupt("velocity count does not match parameter count"));
            }
            let names: Vec<String> = tensors.iter().map(|(n, _)| format!("{VELOCITY_PREFIX}{n}")).collect();
            for ((name, v), (_, p)) in names.into_iter().zip(velocity).zip(self.params.named_tensors()) {
                if v.shape() != p.shape() {
                    return Err(corrupt(format!("velocity {name} has shape {:?}", v.shape())));
                }
                tensors.push((name, v));
            }
        }
        let mut offset = 0u64;
        let entries = tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            arch: self.params.arch.clone(),
            step: self.step,
            tensors: entries,
        })?;

        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing SHDW magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!(
                "format version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let data = &bytes[data_start..];

        let mut params = init_params(&header.arch, &mut Rng::seed_from_u64(0))?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let has_velocity = header.tensors.len() == 2 * names.len();
        if header.tensors.len() != names.len() && !has_velocity {
            return Err(corrupt(format!(
                "expected {} or {} tensors, found {}",
                names.len(),
                2 * names.len(),
                header.tensors.len()
            )));
        }

        let read = |entry: &Entry, expected_name: &str, expected: &[usize]| -> Result<Tensor> {
            if entry.name != expected_name || entry.shape != expected {
                return Err(corrupt(format!(
                    "tensor {} {:?} does not match {expected_name} {expected:?}",
                    entry.name, entry.shape
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let raw = start
                .checked_add(4 * numel)
                .and_then(|end| data.get(start..end))
                .ok_or_else(|| corrupt(format!("tensor {} runs past end of file", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(entry.shape.clone(), values)
        };

        let mut velocity = Vec::new();
        {
            let mut targets = params.tensors_mut();
            for (i, name) in names.iter().enumerate() {
                let t = read(&header.tensors[i], name, targets[i].shape())?;
                if has_velocity {
                    let vname = format!("{VELOCITY_PREFIX}{name}");
                    velocity.push(read(&header.tensors[names.len() + i], &vname, t.shape())?);
                }
                *targets[i] = t;
            }
        }
        Ok(Checkpoint {
            params,
            velocity: has_velocity.then_some(velocity),
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let arch = ArchConfig {
            input_size: (16, 16),
            enc_channels: vec![2, 3],
            ..Default::default()
        };
        let params = init_params(&arch, &mut Rng::seed_from_u64(11)).unwrap();
        let velocity = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::from_fn(t.shape().to_vec(), |i| i as f32 * -1.5e-7))
            .collect();
        Checkpoint {
            params,
            velocity: Some(velocity),
            step: 42,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SHDW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let plain = Checkpoint::new(ck.params.clone());
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(), plain);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}

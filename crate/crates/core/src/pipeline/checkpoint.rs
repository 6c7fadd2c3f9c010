//! Binary checkpoint format.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "MPCC"  version:u32
//! header_len:u32  header: UTF-8 JSON (config digest, provenance, counters)
//! count:u32  count × tensor            -- model parameters
//! count:u32  count × tensor            -- optimizer and normalizer state
//! rng_len:u32  rng bytes
//! tensor := name_len:u16 name rank:u8 dims:u32×rank payload:f64×numel
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Normalizer;
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{AdamState, Tensor};
use crate::pipeline::Stage;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPCC";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_FIRST: &str = "adam.m.";
const ADAM_SECOND: &str = "adam.v.";
const ADAM_STEP: &str = "adam.step";
const NORM_MEAN: &str = "normalizer.mean";
const NORM_STD: &str = "normalizer.std";
const RNG_BYTES: usize = 32 + 8 + 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config_digest: String,
    pub stage: Stage,
    /// SHA-256 of the checkpoint file this one was initialized from.
    pub parent_digest: Option<String>,
    pub model: ModelConfig,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub adam: AdamState,
    /// Feature statistics the model was trained under.
    pub normalizer: Option<Normalizer>,
    pub rng: ChaCha8Rng,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| Error::Invalid(format!("tensor {name} has too many dimensions")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("tensor {name} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Invalid("section too large".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn rng_bytes(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(RNG_BYTES);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn malformed(&self, what: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            what: what.into(),
        }
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let n = u16::from_le_bytes(self.take(2, "tensor name length")?.try_into().unwrap());
        let name = std::str::from_utf8(self.take(n as usize, "tensor name")?)
            .map_err(|_| self.malformed("tensor name is not UTF-8"))?
            .to_string();
        let rank = self.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (self.buf.len() - self.pos) / 8)
            .ok_or_else(|| Error::Truncated {
                path: self.path.to_path_buf(),
                what: format!("payload of {name}"),
            })?;
        let data = self
            .take(numel * 8, "tensor payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| self.malformed(e.to_string()))?;
        Ok((name, t))
    }

    fn tensors(&mut self, what: &str) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32(what)?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = self.tensor()?;
            if out.insert(name.clone(), t).is_some() {
                return Err(self.malformed(format!("duplicate tensor {name}")));
            }
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut header = self.header.clone();
        header.step = self.adam.step;
        header.adam_beta1 = self.adam.beta1;
        header.adam_beta2 = self.adam.beta2;
        header.adam_eps = self.adam.eps;
        let json = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);

        put_u32(&mut out, self.params.len())?;
        for (name, t) in &self.params.tensors {
            put_tensor(&mut out, name, t)?;
        }

        let mut state: Vec<(String, &Tensor)> = Vec::new();
        let step = Tensor::scalar(self.adam.step as f64);
        state.push((ADAM_STEP.to_string(), &step));
        for (name, t) in &self.adam.first {
            state.push((format!("{ADAM_FIRST}{name}"), t));
        }
        for (name, t) in &self.adam.second {
            state.push((format!("{ADAM_SECOND}{name}"), t));
        }
        let norm = self.normalizer.as_ref().map(|n| {
            let d = n.mean.len();
            (
                Tensor::new(vec![d], n.mean.clone()).expect("mean shape"),
                Tensor::new(vec![d], n.std.clone()).expect("std shape"),
            )
        });
        if let Some((mean, std)) = &norm {
            state.push((NORM_MEAN.to_string(), mean));
            state.push((NORM_STD.to_string(), std));
        }
        put_u32(&mut out, state.len())?;
        for (name, t) in state {
            put_tensor(&mut out, &name, t)?;
        }

        let rng = rng_bytes(&self.rng);
        put_u32(&mut out, rng.len())?;
        out.extend_from_slice(&rng);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                version,
            });
        }
        let n = r.u32("header length")? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(n, "header")?)
            .map_err(|e| r.malformed(format!("header: {e}")))?;

        let params = ModelParams {
            tensors: r.tensors("parameter count")?,
        };
        let mut state = r.tensors("state count")?;

        let step = state
            .remove(ADAM_STEP)
            .ok_or_else(|| r.malformed("missing optimizer step"))?;
        let mut adam = AdamState {
            step: step.data().first().copied().unwrap_or(0.0) as u64,
            beta1: header.adam_beta1,
            beta2: header.adam_beta2,
            eps: header.adam_eps,
            ..AdamState::default()
        };
        let normalizer = match (state.remove(NORM_MEAN), state.remove(NORM_STD)) {
            (Some(m), Some(s)) if m.shape() == s.shape() => Some(Normalizer {
                mean: m.into_data(),
                std: s.into_data(),
            }),
            (None, None) => None,
            _ => return Err(r.malformed("incomplete normalizer state")),
        };
        for (name, t) in state {
            if let Some(p) = name.strip_prefix(ADAM_FIRST) {
                adam.first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix(ADAM_SECOND) {
                adam.second.insert(p.to_string(), t);
            } else {
                return Err(r.malformed(format!("unknown state tensor {name}")));
            }
        }

        let n = r.u32("rng length")? as usize;
        let raw = r.take(n, "rng state")?;
        if n != RNG_BYTES {
            return Err(r.malformed(format!("rng state of {n} bytes, expected {RNG_BYTES}")));
        }
        let mut rng = ChaCha8Rng::from_seed(raw[..32].try_into().unwrap());
        rng.set_stream(u64::from_le_bytes(raw[32..40].try_into().unwrap()));
        rng.set_word_pos(u128::from_le_bytes(raw[40..56].try_into().unwrap()));
        if r.pos != buf.len() {
            return Err(r.malformed("trailing bytes"));
        }
        Ok(Checkpoint {
            header,
            params,
            adam,
            normalizer,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// `dir/ckpt-epoch{NNN}.mpcc`
pub fn epoch_checkpoint_path(dir: &Path, epoch: u32) -> PathBuf {
    dir.join(format!("ckpt-epoch{epoch:03}.mpcc"))
}

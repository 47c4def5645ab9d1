//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `CASPCKPT` |
//! | 2 | version (`1`) |
//! | 2 | flags (reserved, `0`) |
//! | 4 | header length `n` |
//! | `n` | JSON header: config, config hash, epoch, optimizer step, RNG state, tensor table |
//! | ... | `f32` payload: parameters, then first moments, then second moments |
//! | 4 | CRC32 of header and payload |
//!
//! Each tensor table entry gives the name, shape and byte offset of one
//! tensor relative to the start of the payload.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bevtraj_core::nn::ParamStore;
use bevtraj_core::optim::AdamW;
use bevtraj_core::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::sample_io::{FormatError, Reader};

pub const MAGIC: &[u8; 8] = b"CASPCKPT";
pub const VERSION: u16 = 1;

const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a `u128` portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            bail!("RNG seed must be 64 hex digits");
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).context("RNG seed is not hex")?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().context("RNG word position is not an integer")?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    config_hash: String,
    epoch: usize,
    optimizer_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Complete training state after `epoch` finished epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let groups: [&[Tensor<f32>]; 3] = [self.params.tensors(), &self.optimizer.m, &self.optimizer.v];
        for (section, group) in SECTIONS.iter().zip(groups) {
            for (id, t) in self.params.ids().zip(group) {
                tensors.push(TensorEntry { name: format!("{section}/{}", self.params.name(id)), shape: t.shape().to_vec(), offset });
                offset += 4 * t.numel();
            }
        }
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config_hash(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&u32::try_from(json.len()).expect("header fits in u32").to_le_bytes());
        out.extend_from_slice(&json);
        for group in groups {
            for t in group {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out[16..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(FormatError::BadMagic { expected: "CASPCKPT" }.into());
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(FormatError::VersionMismatch { found: version as u32, expected: VERSION as u32 }.into());
        }
        let _flags = r.u16()?;
        let header_len = r.u32()? as usize;
        if bytes.len() < 16 + 4 {
            return Err(FormatError::Truncated { needed: 20, available: bytes.len() }.into());
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("four bytes"));
        let header_bytes = r.take(header_len)?;
        if r.position() > body_end {
            return Err(FormatError::Truncated { needed: r.position() + 4, available: bytes.len() }.into());
        }
        let computed = crc32fast::hash(&bytes[16..body_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed }.into());
        }
        let header: Header = serde_json::from_slice(header_bytes).context("checkpoint header is not valid")?;
        let hash = header.config.hash();
        if hash != header.config_hash {
            bail!("checkpoint config hash {} does not match its embedded config ({hash})", header.config_hash);
        }
        header.config.validate()?;

        let payload = &bytes[r.position()..body_end];
        let n = header.tensors.len();
        if n % 3 != 0 {
            bail!("checkpoint has {n} tensors, expected three equal sections");
        }
        let per = n / 3;
        let mut groups: [Vec<Tensor<f32>>; 3] = Default::default();
        let mut names = Vec::with_capacity(per);
        let mut expected_offset = 0;
        for (i, e) in header.tensors.iter().enumerate() {
            let (section, idx) = (i / per, i % per);
            let Some(name) = e.name.strip_prefix(SECTIONS[section]).and_then(|s| s.strip_prefix('/')) else {
                bail!("tensor {:?} is out of place", e.name);
            };
            if section == 0 {
                names.push(name.to_string());
            } else if names[idx] != name || groups[0][idx].shape() != e.shape.as_slice() {
                bail!("tensor {:?} does not match parameter {:?}", e.name, names[idx]);
            }
            let len: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + 4 * len > payload.len() {
                bail!("tensor {:?} has bad offset {}", e.name, e.offset);
            }
            let mut tr = Reader::new(&payload[e.offset..]);
            groups[section].push(Tensor::from_vec(e.shape.clone(), tr.f32s(len)?)?);
            expected_offset += 4 * len;
        }
        if expected_offset != payload.len() {
            bail!("checkpoint payload has {} unexpected bytes", payload.len() - expected_offset);
        }
        let [params, m, v] = groups;
        let mut store = ParamStore::new();
        for (name, t) in names.into_iter().zip(params) {
            store.add(name, t);
        }
        let optimizer = AdamW { config: header.config.optimizer(), step: header.optimizer_step, m, v };
        header.rng.restore()?;
        Ok(Self { config: header.config, epoch: header.epoch, params: store, optimizer, rng: header.rng })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, self.encode()).with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("in checkpoint {}", path.display()))
    }
}

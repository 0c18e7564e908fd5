//! Parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MRSK" | version u32 | seed u64 | section count u32
//! per section: name length u32 | name (utf-8) | element count u64
//! per section, in table order: element count x f32
//! ```

use std::path::Path;

use crate::net_blocks::{NetworkConfig, NetworkParams};

pub const MAGIC: &[u8; 4] = b"MRSK";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unknown section `{0}`")]
    UnknownSection(String),
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("section `{name}` holds {found} values, architecture needs {expected}")]
    SectionSize { name: String, found: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub sections: Vec<(String, Vec<f32>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_params(params: &NetworkParams) -> Self {
        Self {
            seed: params.seed,
            sections: params
                .sections()
                .into_iter()
                .map(|(n, t)| (n, t.iter().map(|&v| v as f32).collect()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        }
        for (_, data) in &self.sections {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut table = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Format("section name is not utf-8".into()))?
                .to_string();
            let n = usize::try_from(r.u64()?).map_err(|_| CheckpointError::Format("section too large".into()))?;
            table.push((name, n));
        }
        let mut sections = Vec::with_capacity(count);
        for (name, n) in table {
            let raw = r.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("section too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            sections.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { seed, sections })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Parameters for `config`; every section must be known and sized to
    /// the architecture, and every tensor must be present.
    pub fn to_params(&self, config: &NetworkConfig) -> Result<NetworkParams, CheckpointError> {
        let mut params = NetworkParams::seeded(config, self.seed);
        let mut slots = params.sections_mut();
        let mut filled = vec![false; slots.len()];
        for (name, data) in &self.sections {
            let k = slots
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| CheckpointError::UnknownSection(name.clone()))?;
            let slot = &mut slots[k].1;
            if slot.len() != data.len() {
                return Err(CheckpointError::SectionSize {
                    name: name.clone(),
                    found: data.len(),
                    expected: slot.len(),
                });
            }
            for (d, &s) in slot.iter_mut().zip(data) {
                *d = s as f64;
            }
            filled[k] = true;
        }
        if let Some(k) = filled.iter().position(|f| !f) {
            return Err(CheckpointError::MissingSection(slots[k].0.clone()));
        }
        drop(slots);
        Ok(params)
    }
}

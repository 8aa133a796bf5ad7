//! Binary checkpoint container for named f64 tensors.
//!
//! Layout: magic `EMCK`, version u32, then entries back to back until end
//! of file. Each entry is a u32 name length, the UTF-8 name, a u32 rank,
//! one u32 per dimension, then the row-major values as little-endian f64.
//! Entry order is preserved, so writing the same checkpoint twice produces
//! identical bytes.
//!
//! An agent manifest travels inside the container as a reserved rank-1
//! entry named `__manifest__` whose values are the UTF-8 bytes of the
//! manifest text; any conforming reader just sees one more tensor.

use std::path::{Path, PathBuf};

use crate::binio;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_ENTRY: &str = "__manifest__";

const MAX_NAME_LEN: usize = 1 << 16;
const MAX_NUMEL: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors plus an optional manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn push(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "checkpoint entry '{}': dims {:?} want {} values, got {}",
                name,
                dims,
                numel,
                data.len()
            )));
        }
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Contract(format!(
                "duplicate checkpoint entry '{name}'"
            )));
        }
        self.entries.push(CheckpointEntry {
            name: name.to_string(),
            dims,
            data,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Tensor entries in file order, manifest excluded.
    pub fn tensors(&self) -> impl Iterator<Item = &CheckpointEntry> {
        self.entries.iter().filter(|e| e.name != MANIFEST_ENTRY)
    }

    pub fn set_manifest(&mut self, text: &str) -> Result<()> {
        let bytes = text.as_bytes();
        self.push(
            MANIFEST_ENTRY,
            vec![bytes.len()],
            bytes.iter().map(|&b| f64::from(b)).collect(),
        )
    }

    pub fn manifest(&self) -> Result<Option<String>> {
        let Some(entry) = self.get(MANIFEST_ENTRY) else {
            return Ok(None);
        };
        let mut bytes = Vec::with_capacity(entry.data.len());
        for &v in &entry.data {
            if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                return Err(Error::Contract(format!(
                    "manifest entry holds non-byte value {v}"
                )));
            }
            bytes.push(v as u8);
        }
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Contract(format!("manifest is not UTF-8: {e}")))?;
        Ok(Some(text))
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = binio::Writer::create(path)?;
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    for entry in &ck.entries {
        w.u32(entry.name.len() as u32)?;
        w.bytes(entry.name.as_bytes())?;
        w.u32(entry.dims.len() as u32)?;
        for &d in &entry.dims {
            w.u32(d as u32)?;
        }
        for &v in &entry.data {
            w.f64(v)?;
        }
    }
    w.finish()
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut cur = binio::Reader::open(path)?;
    let mut magic = [0u8; 4];
    cur.exact(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: PathBuf::from(path),
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(cur.fail(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut ck = Checkpoint::new();
    while let Some(name_len) = cur.u32_or_eof("entry name length")? {
        let name_len = name_len as usize;
        if name_len == 0 || name_len > MAX_NAME_LEN {
            return Err(cur.fail(format!("implausible name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        cur.exact(&mut name_buf, "entry name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| cur.fail(format!("entry name is not UTF-8: {e}")))?;
        let rank = cur.u32("rank")? as usize;
        if rank > 8 {
            return Err(cur.fail(format!("implausible rank {rank} for '{name}'")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = dims.iter().product();
        if numel > MAX_NUMEL {
            return Err(cur.fail(format!("implausible element count {numel} for '{name}'")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64("tensor data")?);
        }
        ck.push(&name, dims, data)?;
    }
    Ok(ck)
}

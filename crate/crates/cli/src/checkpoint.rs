//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//! magic `RGAW`, `u32` version, `u32` tensor count; then per tensor
//! (sorted by name): `u16` name length, UTF-8 name, `u8` rank, `u32`
//! dims, and the row-major `f32` values. Batch-norm running statistics
//! are ordinary named tensors, so a load restores evaluation behaviour
//! exactly.

use std::fs;
use std::path::Path;

use rga_tensor::{ParameterSet, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"RGAW";
pub const VERSION: u32 = 1;

/// One named tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Serializes every parameter and buffer, sorted by name.
pub fn checkpoint_bytes(ps: &ParameterSet<f32>) -> Vec<u8> {
    let mut names: Vec<&str> = ps.names().collect();
    names.sort_unstable();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let value = ps.value(name).expect("name from this set");
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.shape().len() as u8);
        for &d in value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, ps: &ParameterSet<f32>) -> Result<()> {
    fs::write(path, checkpoint_bytes(ps)).map_err(|e| CliError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let slice = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses checkpoint bytes into entries, in file order.
pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<Vec<Entry>> {
    let problem = |msg: &str| CliError::Checkpoint {
        path: path.to_path_buf(),
        problem: msg.to_string(),
    };
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4).ok_or_else(|| problem("file truncated"))?;
    if magic != MAGIC {
        return Err(problem("not a checkpoint file (bad magic)"));
    }
    let version = cur.u32().ok_or_else(|| problem("file truncated"))?;
    if version != VERSION {
        return Err(CliError::Checkpoint {
            path: path.to_path_buf(),
            problem: format!("unsupported version {version} (expected {VERSION})"),
        });
    }
    let count = cur.u32().ok_or_else(|| problem("file truncated"))?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u16().ok_or_else(|| problem("file truncated"))? as usize;
        let name_bytes = cur.take(name_len).ok_or_else(|| problem("file truncated"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| problem("tensor name is not UTF-8"))?
            .to_string();
        let rank = cur.u8().ok_or_else(|| problem("file truncated"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32().ok_or_else(|| problem("file truncated"))? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f32().ok_or_else(|| problem("file truncated"))?);
        }
        entries.push(Entry { name, dims, data });
    }
    if cur.pos != bytes.len() {
        return Err(problem("trailing bytes after the last tensor"));
    }
    Ok(entries)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_checkpoint(path, &bytes)
}

/// Copies entries into an already-registered parameter set. The name sets
/// must match exactly and every shape must agree; the first mismatched
/// tensor (in name order) is reported.
pub fn apply_checkpoint(path: &Path, ps: &mut ParameterSet<f32>, entries: &[Entry]) -> Result<()> {
    let mismatch = |problem: String| CliError::Checkpoint {
        path: path.to_path_buf(),
        problem,
    };
    let mut file_names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
    file_names.sort_unstable();
    let mut model_names: Vec<&str> = ps.names().collect();
    model_names.sort_unstable();
    for pair in model_names.iter().zip(&file_names) {
        match pair {
            (m, f) if m == f => {}
            (m, f) if m < f => {
                return Err(mismatch(format!("tensor '{m}' missing from checkpoint")))
            }
            (_, f) => return Err(mismatch(format!("tensor '{f}' not in the model"))),
        }
    }
    if model_names.len() < file_names.len() {
        let extra = file_names[model_names.len()];
        return Err(mismatch(format!("tensor '{extra}' not in the model")));
    }
    if file_names.len() < model_names.len() {
        let missing = model_names[file_names.len()];
        return Err(mismatch(format!("tensor '{missing}' missing from checkpoint")));
    }
    let mut sorted: Vec<&Entry> = entries.iter().collect();
    sorted.sort_unstable_by_key(|e| e.name.as_str());
    for entry in sorted {
        let param = ps.get_mut(&entry.name).expect("name checked above");
        if param.value.shape() != entry.dims {
            return Err(mismatch(format!(
                "tensor '{}': shape {:?} in checkpoint, {:?} in model",
                entry.name,
                entry.dims,
                param.value.shape()
            )));
        }
        param.value = Tensor::new(&entry.dims, entry.data.clone())?;
    }
    Ok(())
}

/// Loads a checkpoint file into an already-registered parameter set.
pub fn load_checkpoint(path: &Path, ps: &mut ParameterSet<f32>) -> Result<()> {
    let entries = read_checkpoint(path)?;
    apply_checkpoint(path, ps, &entries)
}

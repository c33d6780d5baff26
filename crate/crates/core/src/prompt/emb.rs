//! The EMB1 embedding table: named f32 vectors of one fixed dimension.
//!
//! Layout, all integers little-endian:
//! `"EMB1"`, version `u16`, dtype `u8` (0 = f32 LE), dim `u32`, count `u32`,
//! then `count` records of {name length `u16`, UTF-8 name, `dim` f32 values}.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::PromptError;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB_VERSION: u16 = 1;
pub const DTYPE_F32_LE: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbRecord {
    pub name: String,
    pub values: Vec<f32>,
}

/// Records in file order. Lookup by name returns the first record carrying it.
#[derive(Debug, Clone, Default)]
pub struct EmbTable {
    dim: usize,
    records: Vec<EmbRecord>,
    index: HashMap<String, usize>,
}

impl PartialEq for EmbTable {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

impl EmbTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbRecord] {
        &self.records
    }

    pub fn push(&mut self, name: impl Into<String>, values: Vec<f32>) -> Result<(), PromptError> {
        let name = name.into();
        if values.len() != self.dim {
            return Err(PromptError::ShapeMismatch {
                expected: self.dim,
                got: values.len(),
            });
        }
        if name.len() > u16::MAX as usize {
            return Err(PromptError::Format(format!(
                "record name of {} bytes exceeds the u16 length field",
                name.len()
            )));
        }
        self.index.entry(name.clone()).or_insert(self.records.len());
        self.records.push(EmbRecord { name, values });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.index
            .get(name)
            .map(|&i| self.records[i].values.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let record_bytes: usize = self
            .records
            .iter()
            .map(|r| 2 + r.name.len() + 4 * self.dim)
            .sum();
        let mut out = Vec::with_capacity(15 + record_bytes);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMB_VERSION.to_le_bytes());
        out.push(DTYPE_F32_LE);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PromptError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != EMB_MAGIC {
            return Err(PromptError::Format("bad magic, expected EMB1".into()));
        }
        let version = r.u16()?;
        if version != EMB_VERSION {
            return Err(PromptError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32_LE {
            return Err(PromptError::Format(format!(
                "unsupported dtype code {dtype}"
            )));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let mut table = EmbTable::new(dim);
        for i in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| PromptError::Format(format!("record {i}: name is not UTF-8")))?
                .to_string();
            let raw = r.take(4 * dim)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.push(name, values)?;
        }
        if r.pos != bytes.len() {
            return Err(PromptError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(table)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PromptError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| PromptError::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, PromptError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, PromptError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_emb(path: &Path, table: &EmbTable) -> Result<(), PromptError> {
    let tmp = path.with_extension("emb.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&table.to_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_emb(path: &Path) -> Result<EmbTable, PromptError> {
    EmbTable::from_bytes(&fs::read(path)?)
}

//! File formats: binary tensor files and versioned JSON documents.
//!
//! A tensor file is a sequence of records, each little-endian:
//! magic `MXQT`, `u32` rank, `rank × u32` dims, then `f32` payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationProblem, BitAllocation, Mode, VerificationReport};
use crate::error::{Error, Result};
use crate::importance::ImportanceProfile;
use crate::profiler::LayerStats;
use crate::synergy::SynergyProfile;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MXQT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_tensors(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Parse(format!("tensor file truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { buf, pos: 0 };
    let mut out = Vec::new();
    while r.pos < buf.len() {
        if r.take(4)? != MAGIC {
            return Err(Error::Parse(format!("bad tensor magic at byte {}", r.pos - 4)));
        }
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Parse(format!("unsupported tensor rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Parse("tensor size overflows".into()))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::Parse("tensor size overflows".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push(Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))?);
    }
    if out.is_empty() {
        return Err(Error::Parse("tensor file holds no records".into()));
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    decode_tensors(&fs::read(path)?)
}

/// Output of the profiling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileDocument {
    pub format_version: u32,
    pub spec_hash: String,
    pub seed: u64,
    /// RFC 3339 creation time; the only field that varies between identical runs.
    pub created: String,
    pub importance: ImportanceProfile,
    pub synergy: SynergyProfile,
    pub stats: LayerStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationDocument {
    pub format_version: u32,
    pub spec_hash: String,
    pub mode: Mode,
    pub target_bits: u32,
    pub problem: AllocationProblem,
    pub allocation: BitAllocation,
    pub verification: VerificationReport,
    /// `Σ Ŝ·|Δb|` of the allocation under its own problem's pair weights.
    pub realized_penalty: f64,
    /// Bits of the layers kept at full precision.
    pub overhead_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub label: String,
    /// Per-layer bits; absent for the full-precision row.
    pub bits: Option<Vec<u32>>,
    pub mean_kl: f64,
    pub mean_logit_mse: f64,
    pub size_bits: u64,
    pub bitops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u32,
    pub spec_hash: String,
    pub note: String,
    pub seed: u64,
    pub calibration_images: usize,
    pub eval_images: usize,
    pub rows: Vec<EvaluationRow>,
}

/// Documents that carry a `format_version`.
pub trait Versioned {
    fn format_version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {$(
        impl Versioned for $t {
            fn format_version(&self) -> u32 {
                self.format_version
            }
        }
    )*};
}
versioned!(ProfileDocument, AllocationDocument, EvaluationReport);

pub fn to_json<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents serialize");
    s.push('\n');
    s
}

pub fn from_json<T: DeserializeOwned + Versioned>(text: &str, what: &str) -> Result<T> {
    let doc: T = serde_json::from_str(text).map_err(|e| Error::Parse(format!("{what}: {e}")))?;
    if doc.format_version() != FORMAT_VERSION {
        return Err(Error::Parse(format!("{what}: unsupported format_version {}", doc.format_version())));
    }
    Ok(doc)
}

pub fn save_json<T: Serialize>(path: &Path, doc: &T) -> Result<()> {
    fs::write(path, to_json(doc))?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned + Versioned>(path: &Path, what: &str) -> Result<T> {
    from_json(&fs::read_to_string(path)?, what)
}

pub fn check_spec_hash(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::SpecHashMismatch { expected: expected.into(), found: found.into() });
    }
    Ok(())
}

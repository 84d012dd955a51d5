//! JSON report records and the `GIQS1` binary container.

use std::io::{Read, Write};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{GiqsError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// JSON Schema of [`ReportRecord`].
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

/// Recursively rebuilds objects with keys in sorted order.
pub fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, sort_keys(v));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Serializes with sorted keys and shortest round-trip floats.
pub fn to_canonical_json<T: Serialize>(x: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&sort_keys(serde_json::to_value(x)?))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub budget_mb: u64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub schema_version: u32,
    pub experiment_id: String,
    pub subcommand: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: Value,
    pub payload: Value,
    /// Verification findings (nonzero means exit status 2).
    pub violations: u64,
    pub files: Vec<String>,
    /// Wall-clock data; the only field allowed to differ between reruns.
    pub timing: Timing,
}

impl ReportRecord {
    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Everything except `timing`, canonically serialized.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Value::Object(m) = &mut v {
            m.remove("timing");
        }
        Ok(serde_json::to_string_pretty(&sort_keys(v))?)
    }
}

pub const MAGIC: &[u8; 5] = b"GIQS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub meta: Value,
}

/// Magic, little-endian `u64` header length, JSON header, then the raw
/// little-endian `(re, im)` doubles in row-major order.
pub fn write_container<W: Write>(mut w: W, shape: &[usize], meta: Value, data: &[Complex64]) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(GiqsError::Container(format!(
            "shape {shape:?} holds {n} entries, data has {}",
            data.len()
        )));
    }
    let header = ContainerHeader {
        dtype: "complex128".into(),
        shape: shape.to_vec(),
        meta,
    };
    let h = serde_json::to_string(&sort_keys(serde_json::to_value(&header)?))?;
    w.write_all(MAGIC)?;
    w.write_all(&(h.len() as u64).to_le_bytes())?;
    w.write_all(h.as_bytes())?;
    let mut buf = Vec::with_capacity(16 * data.len());
    for z in data {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(ContainerHeader, Vec<Complex64>)> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| GiqsError::Container("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(GiqsError::Container("bad magic".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| GiqsError::Container("truncated header length".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut h = vec![0u8; len];
    r.read_exact(&mut h)
        .map_err(|_| GiqsError::Container("truncated header".into()))?;
    let header: ContainerHeader =
        serde_json::from_slice(&h).map_err(|e| GiqsError::Container(format!("header: {e}")))?;
    if header.dtype != "complex128" {
        return Err(GiqsError::Container(format!("unsupported dtype {}", header.dtype)));
    }
    let n: usize = header.shape.iter().product();
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != 16 * n {
        return Err(GiqsError::Container(format!(
            "expected {} data bytes, found {}",
            16 * n,
            raw.len()
        )));
    }
    let data = raw
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().expect("8 bytes")),
                f64::from_le_bytes(c[8..].try_into().expect("8 bytes")),
            )
        })
        .collect();
    Ok((header, data))
}

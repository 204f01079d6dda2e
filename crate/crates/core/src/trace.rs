//! Binary attention-trace files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "SIFTTRC1"
//! 8       4     version (u32, currently 1)
//! 12      4     header length H (u32)
//! 16      H     UTF-8 JSON header
//! 16+H    ...   records in step order
//! ```
//!
//! `FULL_SCORES` step `i` (1-based) is a `u32` count equal to `i` followed by
//! `i` `f32` post-softmax scores. `QUANTILES` steps are `L` `f32` values, one
//! per entry of `quantile_levels`, with no count prefix.
//!
//! The header is written as compact JSON with fields in declaration order, so
//! a file written here re-encodes to the same bytes after a read.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::powerlaw::QuantileSeries;

pub const MAGIC: &[u8; 8] = b"SIFTTRC1";
pub const VERSION: u32 = 1;
/// Allowed deviation of a stored score row's sum from one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    #[serde(rename = "FULL_SCORES")]
    FullScores,
    #[serde(rename = "QUANTILES")]
    Quantiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorePrecision {
    F32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model_name: String,
    pub dataset: String,
    pub prompt_id: u64,
    pub layer: u32,
    pub head: u32,
    pub num_steps: u32,
    pub record_kind: RecordKind,
    #[serde(default)]
    pub quantile_levels: Vec<f64>,
    pub score_precision: ScorePrecision,
}

impl TraceHeader {
    pub fn synthetic(num_steps: u32, record_kind: RecordKind, quantile_levels: Vec<f64>) -> Self {
        Self {
            model_name: "synthetic".into(),
            dataset: "synthetic".into(),
            prompt_id: 0,
            layer: 0,
            head: 0,
            num_steps,
            record_kind,
            quantile_levels,
            score_precision: ScorePrecision::F32,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.num_steps < 1 {
            return Err("num_steps must be at least 1".into());
        }
        match self.record_kind {
            RecordKind::Quantiles if self.quantile_levels.is_empty() => {
                Err("QUANTILES traces need at least one quantile level".into())
            }
            RecordKind::FullScores if !self.quantile_levels.is_empty() => {
                Err("FULL_SCORES traces carry no quantile levels".into())
            }
            _ => match self
                .quantile_levels
                .iter()
                .find(|t| !(0.0..=1.0).contains(*t))
            {
                Some(t) => Err(format!("quantile level {t} outside [0, 1]")),
                None => Ok(()),
            },
        }
    }
}

/// A trace for one (prompt, layer, head). `records[i]` holds step `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    header: TraceHeader,
    records: Vec<Vec<f32>>,
}

impl AttentionTrace {
    /// Checks shape and value invariants. `num_steps` must match the records.
    pub fn new(header: TraceHeader, records: Vec<Vec<f32>>) -> Result<Self> {
        header.validate().map_err(Error::InvalidInput)?;
        if records.len() != header.num_steps as usize {
            return Err(Error::invalid(format!(
                "header declares {} steps but {} records were given",
                header.num_steps,
                records.len()
            )));
        }
        for (i, row) in records.iter().enumerate() {
            validate_record(&header, i + 1, row)?;
        }
        Ok(Self { header, records })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }

    pub fn records(&self) -> &[Vec<f32>] {
        &self.records
    }

    pub fn num_steps(&self) -> usize {
        self.records.len()
    }

    /// Step `step` (1-based) as `f64`.
    pub fn row_f64(&self, step: usize) -> Option<Vec<f64>> {
        step.checked_sub(1)
            .and_then(|i| self.records.get(i))
            .map(|r| r.iter().map(|&x| x as f64).collect())
    }

    /// Per-step `tau`-quantile. Computed from the rows of a `FULL_SCORES`
    /// trace, or read from the matching column of a `QUANTILES` trace.
    pub fn quantile_series(&self, tau: f64) -> Result<QuantileSeries> {
        match self.header.record_kind {
            RecordKind::FullScores => {
                let mut values = Vec::with_capacity(self.records.len());
                let mut buf = Vec::new();
                for row in &self.records {
                    buf.clear();
                    buf.extend(row.iter().map(|&x| x as f64));
                    buf.sort_unstable_by(f64::total_cmp);
                    values.push(math::quantile_sorted(&buf, tau));
                }
                QuantileSeries::new(tau, values)
            }
            RecordKind::Quantiles => {
                let col = self
                    .header
                    .quantile_levels
                    .iter()
                    .position(|&t| (t - tau).abs() < 1e-9)
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "trace has no quantile level {tau} (levels {:?})",
                            self.header.quantile_levels
                        ))
                    })?;
                let values = self.records.iter().map(|r| r[col] as f64).collect();
                QuantileSeries::new(tau, values)
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let body: usize = self.records.iter().map(|r| r.len() * 4 + 4).sum();
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let full = self.header.record_kind == RecordKind::FullScores;
        for row in &self.records {
            if full {
                out.extend_from_slice(&(row.len() as u32).to_le_bytes());
            }
            for x in row {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported version {version}")));
        }
        let header_len = cur.u32("header length")? as usize;
        let header_bytes = cur.take(header_len, "header")?;
        let header: TraceHeader = serde_json::from_slice(header_bytes).map_err(|e| {
            Error::format(PREAMBLE_LEN as u64, format!("invalid JSON header: {e}"))
        })?;
        header
            .validate()
            .map_err(|m| Error::format(PREAMBLE_LEN as u64, m))?;

        let steps = header.num_steps as usize;
        let mut records = Vec::with_capacity(steps);
        for step in 1..=steps {
            let len = match header.record_kind {
                RecordKind::FullScores => {
                    let at = cur.pos;
                    let n = cur.u32("score count")? as usize;
                    if n != step {
                        return Err(Error::format(
                            at as u64,
                            format!("step {step} declares {n} scores, expected {step}"),
                        ));
                    }
                    n
                }
                RecordKind::Quantiles => header.quantile_levels.len(),
            };
            let raw = cur.take(len * 4, "record")?;
            let row: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            validate_record(&header, step, &row)?;
            records.push(row);
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(
                cur.pos as u64,
                format!("{} trailing bytes after the last step", bytes.len() - cur.pos),
            ));
        }
        Ok(Self { header, records })
    }
}

fn validate_record(header: &TraceHeader, step: usize, row: &[f32]) -> Result<()> {
    let bad = |message: String| Error::Validation { step, message };
    match header.record_kind {
        RecordKind::FullScores => {
            if row.len() != step {
                return Err(bad(format!("row has {} scores, expected {step}", row.len())));
            }
            if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(bad(format!("score {x} outside [0, 1]")));
            }
            let sum: f64 = row.iter().map(|&x| x as f64).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(bad(format!("scores sum to {sum}, not 1 within {ROW_SUM_TOLERANCE}")));
            }
        }
        RecordKind::Quantiles => {
            if row.len() != header.quantile_levels.len() {
                return Err(bad(format!(
                    "{} quantiles for {} levels",
                    row.len(),
                    header.quantile_levels.len()
                )));
            }
            if let Some(x) = row.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(bad(format!("quantile {x} is not finite and positive")));
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn write_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&trace.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<AttentionTrace> {
    AttentionTrace::from_bytes(&fs::read(path)?)
}

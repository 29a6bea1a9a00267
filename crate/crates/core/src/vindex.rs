//! Exact flat nearest-neighbor index over fused vectors.
//!
//! Vectors are stored as `f32`; all distances are accumulated and compared in
//! `f64`. Equal distances are ordered by insertion position.
//!
//! On-disk layout (little-endian, no padding):
//!
//! ```text
//! "CAVI" | version u32 | metric u8 (0 = l2, 1 = cosine) | dim u32 | count u32
//! count × ( id_len u16 | id utf8 | cohort_len u16 | cohort utf8 | dim × f32 )
//! ```

use std::cmp::Ordering;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{CohortId, FusedVector};

pub const INDEX_MAGIC: &[u8; 4] = b"CAVI";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    #[default]
    Cosine,
}

impl Metric {
    fn code(self) -> u8 {
        match self {
            Metric::L2 => 0,
            Metric::Cosine => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Metric::L2),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "l2" | "L2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(format!("unknown metric {other:?} (expected l2|cosine)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from zero entries")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero norm vector for {0} under cosine metric")]
    ZeroNorm(String),
    #[error("non-finite value in vector for {0}")]
    NonFinite(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("version mismatch: file has {found}, expected {INDEX_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("truncated payload")]
    Truncated,
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One database vector with its cohort label.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub vector: FusedVector,
    pub cohort: CohortId,
    pub patient_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub patient_id: String,
    pub cohort: CohortId,
    pub distance: f64,
    /// Insertion position in the index.
    pub position: usize,
}

/// Neighbors in ascending distance order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborSet(Vec<Neighbor>);

impl NeighborSet {
    pub fn new(neighbors: Vec<Neighbor>) -> Self {
        Self(neighbors)
    }

    pub fn as_slice(&self) -> &[Neighbor] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.0.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.0.iter().map(|n| n.patient_id.clone()).collect()
    }
}

impl<'a> IntoIterator for &'a NeighborSet {
    type Item = &'a Neighbor;
    type IntoIter = std::slice::Iter<'a, Neighbor>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// Immutable exact index.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    metric: Metric,
    dim: usize,
    ids: Vec<String>,
    cohorts: Vec<CohortId>,
    /// Row-major `count × dim` stored values.
    data: Vec<f32>,
    /// Unit-normalized rows, populated for cosine only.
    unit: Vec<f64>,
}

impl VectorIndex {
    pub fn build(entries: Vec<IndexEntry>, metric: Metric) -> Result<Self, IndexError> {
        let dim = entries.first().ok_or(IndexError::Empty)?.vector.dim();
        let mut ids = Vec::with_capacity(entries.len());
        let mut cohorts = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        for entry in entries {
            if entry.vector.dim() != dim {
                return Err(IndexError::DimensionMismatch {
                    expected: dim,
                    found: entry.vector.dim(),
                });
            }
            let start = data.len();
            data.extend(entry.vector.as_slice().iter().map(|v| *v as f32));
            if data[start..].iter().any(|v| !v.is_finite()) {
                return Err(IndexError::NonFinite(entry.patient_id));
            }
            ids.push(entry.patient_id);
            cohorts.push(entry.cohort);
        }
        Self::from_parts(metric, dim, ids, cohorts, data)
    }

    fn from_parts(
        metric: Metric,
        dim: usize,
        ids: Vec<String>,
        cohorts: Vec<CohortId>,
        data: Vec<f32>,
    ) -> Result<Self, IndexError> {
        if ids.is_empty() {
            return Err(IndexError::Empty);
        }
        let mut unit = Vec::new();
        if metric == Metric::Cosine {
            unit.reserve(data.len());
            for (row, id) in data.chunks(dim.max(1)).zip(&ids) {
                let norm = row.iter().map(|v| f64::from(*v).powi(2)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(IndexError::ZeroNorm(id.clone()));
                }
                unit.extend(row.iter().map(|v| f64::from(*v) / norm));
            }
        }
        Ok(Self {
            metric,
            dim,
            ids,
            cohorts,
            data,
            unit,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn patient_id(&self, position: usize) -> &str {
        &self.ids[position]
    }

    pub fn cohort(&self, position: usize) -> &CohortId {
        &self.cohorts[position]
    }

    /// Stored (f32) values of one entry.
    pub fn vector(&self, position: usize) -> &[f32] {
        &self.data[position * self.dim..(position + 1) * self.dim]
    }

    /// Exact top-k under the index metric. Returns all entries when `k > len`.
    pub fn search(&self, query: &[f64], k: usize) -> Result<NeighborSet, IndexError> {
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let mut scored: Vec<(f64, usize)> = match self.metric {
            Metric::L2 => self
                .data
                .chunks(self.dim.max(1))
                .map(|row| {
                    row.iter()
                        .zip(query)
                        .map(|(x, q)| {
                            let d = q - f64::from(*x);
                            d * d
                        })
                        .sum::<f64>()
                })
                .enumerate()
                .map(|(i, sq)| (sq, i))
                .collect(),
            Metric::Cosine => {
                let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    // No direction: every entry is equally (dis)similar.
                    (0..self.len()).map(|i| (1.0, i)).collect()
                } else {
                    let q: Vec<f64> = query.iter().map(|v| v / norm).collect();
                    self.unit
                        .chunks(self.dim.max(1))
                        .map(|row| 1.0 - row.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>())
                        .enumerate()
                        .map(|(i, d)| (d, i))
                        .collect()
                }
            }
        };

        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_key);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_key);

        let neighbors = scored
            .into_iter()
            .map(|(d, i)| Neighbor {
                patient_id: self.ids[i].clone(),
                cohort: self.cohorts[i].clone(),
                distance: if self.metric == Metric::L2 { d.sqrt() } else { d },
                position: i,
            })
            .collect();
        Ok(NeighborSet(neighbors))
    }

    /// Parallel search; results are returned in query order.
    pub fn search_batch(&self, queries: &[FusedVector], k: usize) -> Result<Vec<NeighborSet>, IndexError> {
        queries.par_iter().map(|q| self.search(q.as_slice(), k)).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), IndexError> {
        let as_u32 = |n: usize, what: &str| {
            u32::try_from(n).map_err(|_| IndexError::CorruptHeader(format!("{what} {n} exceeds u32")))
        };
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&[self.metric.code()])?;
        w.write_all(&as_u32(self.dim, "dimension")?.to_le_bytes())?;
        w.write_all(&as_u32(self.len(), "count")?.to_le_bytes())?;
        for i in 0..self.len() {
            write_str16(&mut w, &self.ids[i])?;
            write_str16(&mut w, self.cohorts[i].as_str())?;
            for v in self.vector(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        let mut buf = Vec::with_capacity(17 + self.data.len() * 4 + self.len() * 16);
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(INDEX_MAGIC.as_slice()) {
            return Err(IndexError::CorruptHeader("bad magic bytes".into()));
        }
        let version = r
            .u32()
            .map_err(|_| IndexError::CorruptHeader("missing version".into()))?;
        if version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch { found: version });
        }
        let code = r.u8().map_err(|_| IndexError::CorruptHeader("missing metric".into()))?;
        let metric = Metric::from_code(code).ok_or_else(|| IndexError::CorruptHeader(format!("metric code {code}")))?;
        let dim = r
            .u32()
            .map_err(|_| IndexError::CorruptHeader("missing dimension".into()))? as usize;
        let count = r.u32().map_err(|_| IndexError::CorruptHeader("missing count".into()))? as usize;

        let mut ids = Vec::with_capacity(count.min(1 << 20));
        let mut cohorts = Vec::with_capacity(count.min(1 << 20));
        let mut data = Vec::with_capacity(count.saturating_mul(dim).min(1 << 26));
        for _ in 0..count {
            ids.push(r.str16()?);
            cohorts.push(CohortId::new(r.str16()?));
            let raw = r.take(dim * 4)?;
            data.extend(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            );
        }
        if r.pos != bytes.len() {
            return Err(IndexError::CorruptPayload(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(IndexError::NonFinite(ids[i / dim.max(1)].clone()));
        }
        Self::from_parts(metric, dim, ids, cohorts, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<(), IndexError> {
    let len = u16::try_from(s.len()).map_err(|_| IndexError::CorruptPayload(format!("string too long: {s:.32}…")))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        let end = self.pos.checked_add(n).ok_or(IndexError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(IndexError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, IndexError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IndexError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str16(&mut self) -> Result<String, IndexError> {
        let len = self.u16()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| IndexError::CorruptPayload("invalid utf-8".into()))
    }
}

/// Orders neighbors by (distance, position); exposed for oracle comparisons.
pub fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.position.cmp(&b.position))
}

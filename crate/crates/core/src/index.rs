//! Exact inner-product index over unit descriptors.
//!
//! File layout (`SARI`, little-endian): magic, u32 version, u32 dim, u64
//! count, then per record a u16-prefixed UTF-8 id, a u16-prefixed UTF-8
//! scene name, the footprint as four f64 (`min_x, min_y, max_x, max_y`) and
//! `dim` f32 vector components.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{read_all, write_atomic, Reader, Writer};
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SARI";
const VERSION: u32 = 1;
const UNIT_TOL: f64 = 1e-4;

/// Axis-aligned rectangle in scene (geographic) units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFootprint {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl GeoFootprint {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let fp = Self { min_x, min_y, max_x, max_y };
        if fp.is_valid() {
            Ok(fp)
        } else {
            Err(Error::InvalidConfig(format!("degenerate footprint {fp:?}")))
        }
    }

    pub fn is_valid(&self) -> bool {
        self.min_x < self.max_x && self.min_y < self.max_y
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x) * (self.max_y - self.min_y)
    }

    /// Area of the intersection, 0 when the rectangles only touch or are apart.
    pub fn intersection_area(&self, other: &GeoFootprint) -> f64 {
        let w = self.max_x.min(other.max_x) - self.min_x.max(other.min_x);
        let h = self.max_y.min(other.max_y) - self.min_y.max(other.min_y);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub id: String,
    pub footprint: GeoFootprint,
    pub vector: FeatureVector<f32>,
    pub source_scene: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EmbeddingIndex {
    dim: usize,
    records: Vec<PatchRecord>,
    by_id: HashMap<String, usize>,
}

impl PartialEq for EmbeddingIndex {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.records == other.records
    }
}

fn score(q: &[f32], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Score descending, then id ascending.
fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
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

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&PatchRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn add(&mut self, record: PatchRecord) -> Result<()> {
        if record.vector.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: record.vector.dim(),
            });
        }
        if self.by_id.contains_key(&record.id) {
            return Err(Error::DuplicateId(record.id));
        }
        if !record.vector.is_unit(UNIT_TOL) {
            return Err(Error::NotUnitNorm(record.vector.norm()));
        }
        if !record.footprint.is_valid() {
            return Err(Error::InvalidConfig(format!("degenerate footprint for {}", record.id)));
        }
        self.by_id.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    fn check_query(&self, q: &FeatureVector<f32>) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if q.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: q.dim(),
            });
        }
        Ok(())
    }

    /// Every record position with its score, in rank order. Records for
    /// which `skip` returns true are left out.
    pub fn rank_all_filtered(
        &self,
        q: &FeatureVector<f32>,
        skip: impl Fn(&PatchRecord) -> bool,
    ) -> Result<Vec<(usize, f64)>> {
        self.check_query(q)?;
        let mut scored: Vec<(usize, f64)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| !skip(r))
            .map(|(i, r)| (i, score(q.values(), r.vector.values())))
            .collect();
        scored.sort_by(|a, b| {
            rank_order(
                (&self.records[a.0].id, a.1),
                (&self.records[b.0].id, b.1),
            )
        });
        Ok(scored)
    }

    pub fn rank_all(&self, q: &FeatureVector<f32>) -> Result<Vec<(usize, f64)>> {
        self.rank_all_filtered(q, |_| false)
    }

    /// The `min(k, len)` best records by inner product.
    pub fn query(&self, q: &FeatureVector<f32>, k: usize) -> Result<Vec<SearchHit>> {
        self.query_excluding(q, k, None)
    }

    /// Like [`query`](Self::query) but never returns the record named `exclude`.
    pub fn query_excluding(&self, q: &FeatureVector<f32>, k: usize, exclude: Option<&str>) -> Result<Vec<SearchHit>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        let ranked = self.rank_all_filtered(q, |r| Some(r.id.as_str()) == exclude)?;
        Ok(ranked
            .into_iter()
            .take(k)
            .map(|(i, score)| SearchHit {
                id: self.records[i].id.clone(),
                score,
            })
            .collect())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(self.dim as u32);
        w.u64(self.records.len() as u64);
        for r in &self.records {
            w.string(&r.id)?;
            w.string(&r.source_scene)?;
            let fp = &r.footprint;
            for v in [fp.min_x, fp.min_y, fp.max_x, fp.max_y] {
                w.f64(v);
            }
            w.f32_slice(r.vector.values());
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "index");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut index = Self::new(dim);
        for _ in 0..count {
            let id = r.string()?;
            let source_scene = r.string()?;
            let footprint = GeoFootprint {
                min_x: r.f64()?,
                min_y: r.f64()?,
                max_x: r.f64()?,
                max_y: r.f64()?,
            };
            let vector = FeatureVector(r.f32_vec(dim)?);
            index
                .add(PatchRecord {
                    id,
                    footprint,
                    vector,
                    source_scene,
                })
                .map_err(|e| match e {
                    Error::MalformedFile(_) => e,
                    other => Error::MalformedFile(other.to_string()),
                })?;
        }
        r.finish()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_all(path.as_ref())?)
    }
}

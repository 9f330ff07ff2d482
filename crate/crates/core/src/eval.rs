//! Retrieval scoring: geographic-overlap relevance, AP, mAP and mP@n.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::write_atomic;
use crate::encoder::FeatureVector;
use crate::error::{Error, Result};
use crate::index::{EmbeddingIndex, GeoFootprint};

/// True iff the rectangles share strictly positive area.
pub fn is_relevant(a: &GeoFootprint, b: &GeoFootprint) -> bool {
    a.intersection_area(b) > 0.0
}

/// Positive-area overlap covering at least `min_fraction` of the smaller
/// rectangle. `min_fraction = 0` is [`is_relevant`].
pub fn is_relevant_with(a: &GeoFootprint, b: &GeoFootprint, min_fraction: f64) -> bool {
    let inter = a.intersection_area(b);
    inter > 0.0 && inter >= min_fraction * a.area().min(b.area())
}

/// `(1/R) Σ_{r relevant} P@r` over a ranking of the whole database.
pub fn average_precision(relevance: &[bool], total_relevant: usize) -> Result<f64> {
    if total_relevant == 0 {
        return Err(Error::NoRelevantItems);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / total_relevant as f64)
}

pub fn precision_at(relevance: &[bool], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("precision cutoff must be at least 1".into()));
    }
    if relevance.len() < n {
        return Err(Error::ListTooShort {
            len: relevance.len(),
            n,
        });
    }
    Ok(relevance[..n].iter().filter(|r| **r).count() as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub id: String,
    pub footprint: GeoFootprint,
    pub vector: FeatureVector<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ns: Vec<usize>,
    pub min_overlap: f64,
    /// Drop the index record whose id equals the query id from that query's ranking.
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ns: vec![1, 10, 50],
            min_overlap: 0.0,
            exclude_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub ap: f64,
    pub relevant: usize,
    pub precision_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub mp_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryResult>,
    /// Queries with no relevant record, left out of the means.
    pub excluded: Vec<String>,
}

fn score_query(index: &EmbeddingIndex, q: &EvalQuery, opts: &EvalOptions) -> Result<Option<QueryResult>> {
    let ranked = index.rank_all_filtered(&q.vector, |r| opts.exclude_self && r.id == q.id)?;
    let relevance: Vec<bool> = ranked
        .iter()
        .map(|&(i, _)| is_relevant_with(&q.footprint, &index.records()[i].footprint, opts.min_overlap))
        .collect();
    let total = relevance.iter().filter(|r| **r).count();
    if total == 0 {
        return Ok(None);
    }
    let ap = average_precision(&relevance, total)?;
    let mut precision = BTreeMap::new();
    for &n in &opts.ns {
        precision.insert(n, precision_at(&relevance, n)?);
    }
    Ok(Some(QueryResult {
        id: q.id.clone(),
        ap,
        relevant: total,
        precision_at: precision,
    }))
}

/// Ranks the full index for every query and averages AP and P@n over the
/// queries that have at least one relevant record.
pub fn evaluate(index: &EmbeddingIndex, queries: &[EvalQuery], opts: &EvalOptions) -> Result<EvalReport> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let scored: Vec<Result<Option<QueryResult>>> =
        queries.par_iter().map(|q| score_query(index, q, opts)).collect();

    let mut per_query = Vec::with_capacity(queries.len());
    let mut excluded = Vec::new();
    for (q, r) in queries.iter().zip(scored) {
        match r? {
            Some(res) => per_query.push(res),
            None => {
                log::warn!("query {} has no relevant record; excluded from means", q.id);
                excluded.push(q.id.clone());
            }
        }
    }
    if per_query.is_empty() {
        return Err(Error::NoRelevantItems);
    }
    let count = per_query.len() as f64;
    let map = per_query.iter().map(|r| r.ap).sum::<f64>() / count;
    let mut mp_at = BTreeMap::new();
    for &n in &opts.ns {
        let s: f64 = per_query.iter().map(|r| r.precision_at[&n]).sum();
        mp_at.insert(n, s / count);
    }
    Ok(EvalReport {
        map,
        mp_at,
        per_query,
        excluded,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::MalformedFile(format!("report: {e}")))
    }

    /// One aligned row per method:
    ///
    /// ```text
    /// Method      mAP     mP@1    mP@10   mP@50
    /// trained     0.6120  0.9100  0.7830  0.4120
    /// ```
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let ns: Vec<usize> = rows
            .iter()
            .flat_map(|(_, r)| r.mp_at.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("Method".len()) + 2;
        let mut out = format!("{:<width$}{:<8}", "Method", "mAP");
        for n in &ns {
            out.push_str(&format!("{:<8}", format!("mP@{n}")));
        }
        out = out.trim_end().to_string();
        out.push('\n');
        for (method, r) in rows {
            let mut line = format!("{:<width$}{:<8.4}", method, r.map);
            for n in &ns {
                match r.mp_at.get(n) {
                    Some(v) => line.push_str(&format!("{v:<8.4}")),
                    None => line.push_str(&format!("{:<8}", "-")),
                }
            }
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }
}

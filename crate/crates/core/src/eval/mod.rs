//! Gallery ranking and retrieval metrics.
//!
//! Ties in score are broken by gallery id ascending. AP@all divides by the
//! number of relevant gallery items; AP@k divides by the number of relevant
//! items inside the top k. A query without relevant items scores AP 0 and
//! still counts towards the mean.

pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_raster, DatasetManifest, Split};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::vision::{Modality, RasterInstance};

pub const AP_AT_K_DENOMINATOR: &str = "relevant items within the cutoff";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub gallery_id: String,
    pub label: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub query_label: usize,
    pub items: Vec<RankedItem>,
}

impl RankedResult {
    pub fn relevance(&self) -> Vec<bool> {
        self.items.iter().map(|i| i.label == self.query_label).collect()
    }
}

/// Sorts by score descending, then gallery id ascending.
pub fn rank_scores(query_id: impl Into<String>, query_label: usize, mut items: Vec<RankedItem>) -> Result<RankedResult> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot rank an empty gallery".into()));
    }
    if let Some(bad) = items.iter().find(|i| !i.score.is_finite()) {
        return Err(Error::NonFinite(format!("score of gallery item `{}`", bad.gallery_id)));
    }
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.gallery_id.cmp(&b.gallery_id)));
    Ok(RankedResult {
        query_id: query_id.into(),
        query_label,
        items,
    })
}

/// Mean over relevant hits within the cutoff of `hits so far / rank`.
pub fn average_precision(relevance: &[bool], cutoff: Option<usize>) -> f64 {
    let window = cutoff.map_or(relevance.len(), |k| k.min(relevance.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance[..window].iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denominator = match cutoff {
        None => relevance.iter().filter(|&&r| r).count(),
        Some(_) => hits,
    };
    if denominator == 0 {
        0.0
    } else {
        sum / denominator as f64
    }
}

/// Relevant items in the top `min(k, n)` divided by `k`.
pub fn precision_at_k(relevance: &[bool], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let window = k.min(relevance.len());
    relevance[..window].iter().filter(|&&r| r).count() as f64 / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub label: usize,
    pub ap_all: f64,
    pub ap_at: BTreeMap<usize, f64>,
    pub prec_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub map_all: f64,
    pub map_at: BTreeMap<usize, f64>,
    pub prec_at: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryMetrics>,
    pub query_count: usize,
}

/// Cutoffs for mAP@k and Prec@k.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutoffs {
    pub map: Vec<usize>,
    pub prec: Vec<usize>,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self {
            map: vec![200],
            prec: vec![100, 200],
        }
    }
}

pub fn metrics_from_rankings(rankings: &[RankedResult], cutoffs: &Cutoffs) -> Result<MetricReport> {
    if rankings.is_empty() {
        return Err(Error::InvalidArgument("evaluation split has no queries".into()));
    }
    let mut per_query = Vec::with_capacity(rankings.len());
    for r in rankings {
        let rel = r.relevance();
        per_query.push(QueryMetrics {
            query_id: r.query_id.clone(),
            label: r.query_label,
            ap_all: average_precision(&rel, None),
            ap_at: cutoffs.map.iter().map(|&k| (k, average_precision(&rel, Some(k)))).collect(),
            prec_at: cutoffs.prec.iter().map(|&k| (k, precision_at_k(&rel, k))).collect(),
        });
    }
    let n = per_query.len() as f64;
    let mean = |f: &dyn Fn(&QueryMetrics) -> f64| per_query.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        map_all: mean(&|q| q.ap_all),
        map_at: cutoffs.map.iter().map(|&k| (k, mean(&|q| q.ap_at[&k]))).collect(),
        prec_at: cutoffs.prec.iter().map(|&k| (k, mean(&|q| q.prec_at[&k]))).collect(),
        query_count: per_query.len(),
        per_query,
    })
}

/// Labelled ids on one side of a score matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Side {
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
}

/// Ranks every row of a row-major `queries × gallery` score matrix.
pub fn rank_matrix(queries: &Side, gallery: &Side, scores: &[f64]) -> Result<Vec<RankedResult>> {
    let (n, m) = (queries.ids.len(), gallery.ids.len());
    if scores.len() != n * m || queries.labels.len() != n || gallery.labels.len() != m {
        return Err(Error::shape("rank_matrix", &[n, m], &[scores.len()]));
    }
    (0..n)
        .map(|q| {
            let items = (0..m)
                .map(|g| RankedItem {
                    gallery_id: gallery.ids[g].clone(),
                    label: gallery.labels[g],
                    score: scores[q * m + g],
                })
                .collect();
            rank_scores(queries.ids[q].clone(), queries.labels[q], items)
        })
        .collect()
}

/// Metrics as a pure function of scores and labels.
pub fn evaluate_scores(queries: &Side, gallery: &Side, scores: &[f64], cutoffs: &Cutoffs) -> Result<MetricReport> {
    metrics_from_rankings(&rank_matrix(queries, gallery, scores)?, cutoffs)
}

/// Query sketches and gallery images of one split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub split: Split,
    pub queries: Vec<RasterInstance>,
    pub gallery: Vec<RasterInstance>,
}

impl EvalSet {
    pub fn load(manifest: &DatasetManifest, split: Split, size: usize, channels: usize) -> Result<Self> {
        let load = |m: Modality| -> Result<Vec<RasterInstance>> {
            manifest
                .entries_in(split, m)
                .into_iter()
                .map(|e| load_raster(manifest, e, size, channels))
                .collect()
        };
        let set = Self {
            split,
            queries: load(Modality::Sketch)?,
            gallery: load(Modality::Image)?,
        };
        if set.queries.is_empty() {
            return Err(Error::InvalidArgument(format!("split {split} has no query sketches")));
        }
        if set.gallery.is_empty() {
            return Err(Error::InvalidArgument(format!("split {split} has no gallery images")));
        }
        Ok(set)
    }

    pub fn query_side(&self) -> Side {
        side(&self.queries)
    }

    pub fn gallery_side(&self) -> Side {
        side(&self.gallery)
    }
}

fn side(rs: &[RasterInstance]) -> Side {
    Side {
        ids: rs.iter().map(|r| r.instance_id.clone()).collect(),
        labels: rs.iter().map(|r| r.label).collect(),
    }
}

fn score_rows(model: &Model, queries: &[RasterInstance], gallery: &[RasterInstance]) -> Result<Vec<f64>> {
    let f = model.bind(false);
    let mut drop = Dropout::eval();
    let prepared = gallery
        .iter()
        .map(|g| f.prepare(&f.encode_raster(g, &mut drop)?))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        let pq = f.prepare(&f.encode_raster(q, &mut drop)?)?;
        for pg in &prepared {
            out.push(f.score_prepared(&pq, pg, &mut drop)?.item());
        }
    }
    Ok(out)
}

/// Row-major `queries × gallery` relation scores with dropout off.
/// Queries are split across up to `workers` threads.
pub fn score_matrix(model: &Model, queries: &[RasterInstance], gallery: &[RasterInstance], workers: usize) -> Result<Vec<f64>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("cannot rank an empty gallery".into()));
    }
    let workers = workers.clamp(1, queries.len().max(1));
    if workers == 1 {
        return score_rows(model, queries, gallery);
    }
    let chunk = queries.len().div_ceil(workers);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| s.spawn(move || score_rows(model, qs, gallery)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("scoring worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(queries.len() * gallery.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn rank_gallery(model: &Model, query: &RasterInstance, gallery: &[RasterInstance]) -> Result<RankedResult> {
    let scores = score_matrix(model, std::slice::from_ref(query), gallery, 1)?;
    Ok(rank_matrix(&side(std::slice::from_ref(query)), &side(gallery), &scores)?.remove(0))
}

pub struct Evaluation {
    pub report: MetricReport,
    pub rankings: Vec<RankedResult>,
    pub scores: Vec<f64>,
}

pub fn evaluate(model: &Model, set: &EvalSet, cutoffs: &Cutoffs) -> Result<Evaluation> {
    let scores = score_matrix(model, &set.queries, &set.gallery, default_workers())?;
    let rankings = rank_matrix(&set.query_side(), &set.gallery_side(), &scores)?;
    let report = metrics_from_rankings(&rankings, cutoffs)?;
    Ok(Evaluation { report, rankings, scores })
}

/// The on-disk evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub split: Split,
    pub map_all: f64,
    pub map_200: f64,
    pub prec_100: f64,
    pub prec_200: f64,
    pub ap_at_k_denominator: String,
    pub query_count: usize,
    pub gallery_count: usize,
    pub per_query: Vec<QueryMetrics>,
}

impl EvalReport {
    pub fn new(config_digest: &str, split: Split, m: &MetricReport, gallery_count: usize) -> Result<Self> {
        let get = |map: &BTreeMap<usize, f64>, k: usize| {
            map.get(&k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("report needs cutoff {k}")))
        };
        Ok(Self {
            config_digest: config_digest.to_string(),
            split,
            map_all: m.map_all,
            map_200: get(&m.map_at, 200)?,
            prec_100: get(&m.prec_at, 100)?,
            prec_200: get(&m.prec_at, 200)?,
            ap_at_k_denominator: AP_AT_K_DENOMINATOR.into(),
            query_count: m.query_count,
            gallery_count,
            per_query: m.per_query.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `query_id,rank,gallery_id,label,score,relevant` rows.
pub fn rank_csv(rankings: &[RankedResult], top: Option<usize>) -> String {
    let mut out = String::from("query_id,rank,gallery_id,label,score,relevant\n");
    for r in rankings {
        let n = top.map_or(r.items.len(), |k| k.min(r.items.len()));
        for (i, item) in r.items[..n].iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.query_id,
                i + 1,
                item.gallery_id,
                item.label,
                item.score,
                u8::from(item.label == r.query_label)
            ));
        }
    }
    out
}

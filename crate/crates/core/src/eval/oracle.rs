//! Brute-force metric oracle.
//!
//! Ranks are recomputed per item by counting the items that beat it, and
//! every hit count is recomputed by an exhaustive prefix count. Nothing is
//! shared with the sorting implementation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Side;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub map_all: f64,
    pub map_at: BTreeMap<usize, f64>,
    pub prec_at: BTreeMap<usize, f64>,
    pub ap_all: Vec<f64>,
}

/// 1-based rank of every gallery item for one query row.
fn ranks(scores: &[f64], ids: &[String]) -> Vec<usize> {
    (0..scores.len())
        .map(|j| {
            1 + (0..scores.len())
                .filter(|&k| scores[k] > scores[j] || (scores[k] == scores[j] && ids[k] < ids[j]))
                .count()
        })
        .collect()
}

fn ap(rank: &[usize], relevant: &[bool], cutoff: Option<usize>) -> f64 {
    let n = rank.len();
    let window = cutoff.map_or(n, |k| k.min(n));
    let mut sum = 0.0;
    let mut found = 0usize;
    for r in 1..=window {
        let at_r = (0..n).find(|&j| rank[j] == r).expect("ranks are a permutation");
        if relevant[at_r] {
            let hits = (0..n).filter(|&j| relevant[j] && rank[j] <= r).count();
            sum += hits as f64 / r as f64;
            found += 1;
        }
    }
    let denominator = match cutoff {
        None => relevant.iter().filter(|&&x| x).count(),
        Some(_) => found,
    };
    if denominator == 0 {
        0.0
    } else {
        sum / denominator as f64
    }
}

fn precision(rank: &[usize], relevant: &[bool], k: usize) -> f64 {
    (0..rank.len()).filter(|&j| relevant[j] && rank[j] <= k).count() as f64 / k as f64
}

/// Metrics of a row-major `queries × gallery` score matrix.
pub fn oracle_metrics(queries: &Side, gallery: &Side, scores: &[f64], map_ks: &[usize], prec_ks: &[usize]) -> OracleMetrics {
    let m = gallery.ids.len();
    let mut ap_all = Vec::new();
    let mut ap_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut prec_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (q, &label) in queries.labels.iter().enumerate() {
        let row = &scores[q * m..(q + 1) * m];
        let rank = ranks(row, &gallery.ids);
        let relevant: Vec<bool> = gallery.labels.iter().map(|&g| g == label).collect();
        ap_all.push(ap(&rank, &relevant, None));
        for &k in map_ks {
            ap_k.entry(k).or_default().push(ap(&rank, &relevant, Some(k)));
        }
        for &k in prec_ks {
            prec_k.entry(k).or_default().push(precision(&rank, &relevant, k));
        }
    }
    let mean = |v: &[f64]| {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        s / v.len() as f64
    };
    OracleMetrics {
        map_all: mean(&ap_all),
        map_at: ap_k.iter().map(|(k, v)| (*k, mean(v))).collect(),
        prec_at: prec_k.iter().map(|(k, v)| (*k, mean(v))).collect(),
        ap_all,
    }
}

/// Expected mAP@all under uniformly random rankings, estimated over
/// `trials` draws.
pub fn chance_map(queries: &Side, gallery: &Side, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = queries.ids.len() * gallery.ids.len();
    let mut total = 0.0;
    for _ in 0..trials {
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        total += oracle_metrics(queries, gallery, &scores, &[], &[]).map_all;
    }
    total / trials as f64
}

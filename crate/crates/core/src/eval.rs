//! Verification metrics (EER, TPR@FAR, ROC), the pairwise desideratum audit
//! and threshold-cut clustering with optimal cluster/class matching.

use std::collections::{BTreeMap, HashSet};

use pathfinding::prelude::{kuhn_munkres_min, Matrix as CostMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{Matrix, Rng};
use crate::similarity::{SimilarityError, SimilarityKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least one positive and one negative score")]
    EmptySide,
    #[error("requested {requested} {kind} pairs but only {available} exist")]
    TooManyPairs { kind: &'static str, requested: usize, available: u64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredPairs {
    pub pos_scores: Vec<f64>,
    pub neg_scores: Vec<f64>,
}

impl ScoredPairs {
    pub fn new(pos_scores: Vec<f64>, neg_scores: Vec<f64>) -> Self {
        Self { pos_scores, neg_scores }
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.pos_scores.is_empty() || self.neg_scores.is_empty() {
            return Err(EvalError::EmptySide);
        }
        if self.pos_scores.iter().chain(&self.neg_scores).any(|s| !s.is_finite()) {
            return Err(EvalError::Invalid("non-finite score".into()));
        }
        Ok(())
    }
}

/// Number of (same-class, different-class) unordered pairs.
pub fn pair_counts(labels: &[usize]) -> (u64, u64) {
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let n = labels.len() as u64;
    let total = n * n.saturating_sub(1) / 2;
    let intra: u64 = counts.values().map(|&c| c * c.saturating_sub(1) / 2).sum();
    (intra, total - intra)
}

/// Index pairs `(i, j)`, `i < j`, sampled uniformly without replacement.
pub fn sample_eval_pairs(
    labels: &[usize],
    num_pos: usize,
    num_neg: usize,
    seed: u64,
) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>), EvalError> {
    let (intra, inter) = pair_counts(labels);
    if num_pos as u64 > intra {
        return Err(EvalError::TooManyPairs { kind: "same-class", requested: num_pos, available: intra });
    }
    if num_neg as u64 > inter {
        return Err(EvalError::TooManyPairs { kind: "different-class", requested: num_neg, available: inter });
    }
    let mut rng = Rng::new(seed).stream("eval.pairs");
    let n = labels.len();
    let total = intra + inter;
    if total <= 4_000_000 {
        let mut pos = Vec::with_capacity(intra as usize);
        let mut neg = Vec::with_capacity(inter as usize);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    pos.push((i, j));
                } else {
                    neg.push((i, j));
                }
            }
        }
        Ok((take_random(pos, num_pos, &mut rng), take_random(neg, num_neg, &mut rng)))
    } else {
        let mut seen = HashSet::new();
        let mut pos = Vec::with_capacity(num_pos);
        let mut neg = Vec::with_capacity(num_neg);
        while pos.len() < num_pos || neg.len() < num_neg {
            let a = rng.below(n);
            let b = rng.below(n);
            if a == b {
                continue;
            }
            let p = (a.min(b), a.max(b));
            let same = labels[p.0] == labels[p.1];
            let want = if same { pos.len() < num_pos } else { neg.len() < num_neg };
            if want && seen.insert(p) {
                if same {
                    pos.push(p);
                } else {
                    neg.push(p);
                }
            }
        }
        Ok((pos, neg))
    }
}

/// Partial Fisher-Yates: the first `k` of a uniform shuffle.
fn take_random<T>(mut items: Vec<T>, k: usize, rng: &mut Rng) -> Vec<T> {
    let n = items.len();
    for i in 0..k {
        let j = i + rng.below(n - i);
        items.swap(i, j);
    }
    items.truncate(k);
    items
}

/// Scored same-class and different-class pairs drawn from `features`.
pub fn build_eval_pairs(
    features: &Matrix,
    labels: &[usize],
    num_pos: usize,
    num_neg: usize,
    sim: &SimilarityKind,
    seed: u64,
) -> Result<ScoredPairs, EvalError> {
    if features.rows() != labels.len() {
        return Err(EvalError::Invalid(format!("{} rows but {} labels", features.rows(), labels.len())));
    }
    let (pos, neg) = sample_eval_pairs(labels, num_pos, num_neg, seed)?;
    let score = |&(i, j): &(usize, usize)| sim.score(features.row(i), features.row(j));
    Ok(ScoredPairs {
        pos_scores: pos.iter().map(score).collect::<Result<_, _>>()?,
        neg_scores: neg.iter().map(score).collect::<Result<_, _>>()?,
    })
}

/// `−∞`, midpoints between consecutive distinct scores, `+∞`.
pub fn candidate_thresholds(sp: &ScoredPairs) -> Vec<f64> {
    let mut all: Vec<f64> = sp.pos_scores.iter().chain(&sp.neg_scores).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(all.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// `(FAR, FRR)` at every candidate threshold, via sorted counting.
fn rates(sp: &ScoredPairs, thresholds: &[f64]) -> Vec<(f64, f64)> {
    let mut pos = sp.pos_scores.clone();
    let mut neg = sp.neg_scores.clone();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    thresholds
        .iter()
        .map(|&t| {
            let below_pos = pos.partition_point(|&s| s < t);
            let below_neg = neg.partition_point(|&s| s < t);
            ((neg.len() - below_neg) as f64 / nn, below_pos as f64 / np)
        })
        .collect()
}

/// Shared crossing rule once FAR/FRR are known at each threshold.
pub(crate) fn eer_from_rates(thresholds: &[f64], rates: &[(f64, f64)]) -> (f64, f64) {
    for k in 0..rates.len() {
        let (far, frr) = rates[k];
        let d = far - frr;
        if d == 0.0 {
            return (far, finite_threshold(thresholds, k));
        }
        if d < 0.0 {
            // k ≥ 1 because FRR(−∞) = 0
            let (far0, frr0) = rates[k - 1];
            let d0 = far0 - frr0;
            let lambda = d0 / (d0 - d);
            let eer = (1.0 - lambda) * far0 + lambda * far;
            let (t0, t1) = (thresholds[k - 1], thresholds[k]);
            let t = if t0.is_finite() && t1.is_finite() {
                t0 + lambda * (t1 - t0)
            } else if t0.is_finite() {
                t0
            } else {
                t1
            };
            return (eer, t);
        }
    }
    unreachable!("FAR − FRR is −1 at +∞")
}

fn finite_threshold(thresholds: &[f64], k: usize) -> f64 {
    let t = thresholds[k];
    if t.is_finite() {
        t
    } else if k == 0 {
        thresholds.get(1).copied().filter(|x| x.is_finite()).unwrap_or(0.0)
    } else {
        thresholds[k - 1]
    }
}

/// Equal error rate and the interpolated threshold where FAR = FRR, with
/// `FRR(t) = P(pos < t)` and `FAR(t) = P(neg ≥ t)`.
pub fn compute_eer(sp: &ScoredPairs) -> Result<(f64, f64), EvalError> {
    sp.check()?;
    let th = candidate_thresholds(sp);
    let r = rates(sp, &th);
    Ok(eer_from_rates(&th, &r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFar {
    pub far_target: f64,
    pub tpr: f64,
    pub far: f64,
    pub threshold: f64,
    /// Target below the `1/|neg|` resolution of the negative set.
    pub flagged: bool,
}

pub(crate) fn tpr_from_rates(
    thresholds: &[f64],
    rates: &[(f64, f64)],
    target: f64,
    num_neg: usize,
) -> TprAtFar {
    // FAR is non-increasing along the candidates: take the first whose FAR
    // is strictly below target, otherwise the first reaching the minimum.
    let k = match rates.iter().position(|&(far, _)| far < target) {
        Some(k) => k,
        None => {
            let min = rates.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
            rates.iter().position(|&(far, _)| far == min).unwrap_or(rates.len() - 1)
        }
    };
    let (far, frr) = rates[k];
    TprAtFar {
        far_target: target,
        tpr: 1.0 - frr,
        far,
        threshold: thresholds[k],
        flagged: target < 1.0 / num_neg as f64,
    }
}

pub fn tpr_at_far(sp: &ScoredPairs, far_targets: &[f64]) -> Result<Vec<TprAtFar>, EvalError> {
    sp.check()?;
    let th = candidate_thresholds(sp);
    let r = rates(sp, &th);
    Ok(far_targets.iter().map(|&t| tpr_from_rates(&th, &r, t, sp.neg_scores.len())).collect())
}

/// Full ROC as `(FAR, TPR)` from the strictest threshold to the loosest.
pub fn roc_curve(sp: &ScoredPairs) -> Result<Vec<(f64, f64)>, EvalError> {
    sp.check()?;
    let th = candidate_thresholds(sp);
    Ok(rates(sp, &th).into_iter().rev().map(|(far, frr)| (far, 1.0 - frr)).collect())
}

/// FAR grid used for stored ROC curves: 0, then ten points per decade from
/// 1e-5 to 1.
pub fn roc_grid() -> Vec<f64> {
    let mut g = vec![0.0];
    g.extend((0..=50).map(|i| 10f64.powf(-5.0 + i as f64 / 10.0)));
    g
}

/// Best TPR with FAR ≤ each grid value.
pub fn roc_on_grid(sp: &ScoredPairs, grid: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    let full = roc_curve(sp)?;
    Ok(grid
        .iter()
        .map(|&g| {
            let tpr = full.iter().filter(|p| p.0 <= g).map(|p| p.1).fold(0.0, f64::max);
            (g, tpr)
        })
        .collect())
}

fn check_grouped(features: &Matrix, labels: &[usize]) -> Result<(), EvalError> {
    if features.rows() != labels.len() {
        return Err(EvalError::Invalid(format!("{} rows but {} labels", features.rows(), labels.len())));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(EvalError::Invalid("need at least two classes".into()));
    }
    if counts.values().all(|&c| c < 2) {
        return Err(EvalError::Invalid("no class has two samples".into()));
    }
    Ok(())
}

/// `(min intra-class score, max inter-class score)` over all pairs.
pub fn desideratum_extremes(
    features: &Matrix,
    labels: &[usize],
    sim: &SimilarityKind,
) -> Result<(f64, f64), EvalError> {
    check_grouped(features, labels)?;
    sim.validate()?;
    let n = labels.len();
    let (lo, hi) = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for j in i + 1..n {
                let s = sim.score(features.row(i), features.row(j))?;
                if labels[i] == labels[j] {
                    lo = lo.min(s);
                } else {
                    hi = hi.max(s);
                }
            }
            Ok((lo, hi))
        })
        .try_reduce(|| (f64::INFINITY, f64::NEG_INFINITY), |a, b| Ok((a.0.min(b.0), a.1.max(b.1))))
        .map_err(|e: SimilarityError| EvalError::from(e))?;
    Ok((lo, hi))
}

/// Minimum intra-class score minus maximum inter-class score; positive iff
/// every positive pair outscores every negative pair.
pub fn desideratum_audit(features: &Matrix, labels: &[usize], sim: &SimilarityKind) -> Result<f64, EvalError> {
    let (lo, hi) = desideratum_extremes(features, labels, sim)?;
    Ok(lo - hi)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the graph with an edge wherever
/// `score > threshold`. Components are numbered by first row.
pub fn cluster_by_threshold(features: &Matrix, sim: &SimilarityKind, threshold: f64) -> Result<Vec<usize>, EvalError> {
    if !threshold.is_finite() {
        return Err(EvalError::Invalid("threshold must be finite".into()));
    }
    let n = features.rows();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in i + 1..n {
            if sim.score(features.row(i), features.row(j))? > threshold {
                uf.union(i, j);
            }
        }
    }
    let mut ids = BTreeMap::new();
    Ok((0..n)
        .map(|i| {
            let root = uf.find(i);
            let next = ids.len();
            *ids.entry(root).or_insert(next)
        })
        .collect())
}

/// Fraction of rows correctly labelled under the best one-to-one mapping of
/// predicted clusters to classes.
pub fn clustering_accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::Invalid("label length mismatch".into()));
    }
    if truth.is_empty() {
        return Err(EvalError::Invalid("no rows".into()));
    }
    let index = |v: &[usize]| {
        let mut m = BTreeMap::new();
        for &x in v {
            let next = m.len();
            m.entry(x).or_insert(next);
        }
        m
    };
    let (pi, ti) = (index(predicted), index(truth));
    // kuhn_munkres needs rows ≤ columns
    let transpose = pi.len() > ti.len();
    let (nr, nc) = if transpose { (ti.len(), pi.len()) } else { (pi.len(), ti.len()) };
    let mut table = vec![vec![0i64; nc]; nr];
    for (p, t) in predicted.iter().zip(truth) {
        let (r, c) = if transpose { (ti[t], pi[p]) } else { (pi[p], ti[t]) };
        table[r][c] -= 1;
    }
    let cost = CostMatrix::from_rows(table).map_err(|e| EvalError::Invalid(e.to_string()))?;
    let (total, _) = kuhn_munkres_min(&cost);
    Ok((-total) as f64 / truth.len() as f64)
}

/// Best clustering accuracy over all distinct pair-score thresholds:
/// `(accuracy, threshold)`.
pub fn best_threshold_clustering(
    features: &Matrix,
    labels: &[usize],
    sim: &SimilarityKind,
) -> Result<(f64, f64), EvalError> {
    let n = features.rows();
    let mut edges: Vec<(f64, usize, usize)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((sim.score(features.row(i), features.row(j))?, i, j));
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Kruskal order: merge edges from the highest score down; components
    // change only at merge events, so each event is a candidate cut.
    let mut uf = UnionFind::new(n);
    let mut best = (clustering_accuracy(&(0..n).collect::<Vec<_>>(), labels)?, f64::MAX);
    if let Some(e) = edges.first() {
        best.1 = e.0;
    }
    let mut k = 0;
    while k < edges.len() {
        let s = edges[k].0;
        let mut merged = false;
        while k < edges.len() && edges[k].0 == s {
            let (_, i, j) = edges[k];
            if uf.find(i) != uf.find(j) {
                uf.union(i, j);
                merged = true;
            }
            k += 1;
        }
        if merged {
            let pred: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
            let acc = clustering_accuracy(&pred, labels)?;
            if acc > best.0 {
                let next = edges.get(k).map_or(s - 1.0, |e| e.0);
                best = (acc, next + (s - next) / 2.0);
            }
        }
    }
    Ok(best)
}

pub const DEFAULT_FAR_TARGETS: [f64; 3] = [1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub tpr_at_far: Vec<TprAtFar>,
    pub roc: Vec<(f64, f64)>,
    pub desideratum_margin: f64,
    pub clustering_accuracy: f64,
    pub clustering_threshold: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn csv_header(far_targets: &[f64]) -> String {
        let mut h = String::from("eer");
        for t in far_targets {
            h.push_str(&format!(",tpr@far={t:e}"));
        }
        h.push_str(",desideratum_margin,clustering_accuracy");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!("{}", self.eer);
        for t in &self.tpr_at_far {
            r.push_str(&format!(",{}", t.tpr));
        }
        r.push_str(&format!(",{},{}", self.desideratum_margin, self.clustering_accuracy));
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub num_pos: usize,
    pub num_neg: usize,
    pub seed: u64,
    /// Clustering threshold; `None` means the best-threshold search.
    pub cluster_threshold: Option<f64>,
}

/// All metrics for one feature set. Pair counts are capped at the number
/// of available pairs.
pub fn evaluate(
    features: &Matrix,
    labels: &[usize],
    sim: &SimilarityKind,
    opts: &EvalOptions,
    far_targets: &[f64],
) -> Result<EvalReport, EvalError> {
    let (intra, inter) = pair_counts(labels);
    let num_pos = (opts.num_pos as u64).min(intra) as usize;
    let num_neg = (opts.num_neg as u64).min(inter) as usize;
    let sp = build_eval_pairs(features, labels, num_pos, num_neg, sim, opts.seed)?;
    let th = candidate_thresholds(&sp);
    sp.check()?;
    let r = rates(&sp, &th);
    let (eer, eer_threshold) = eer_from_rates(&th, &r);
    let tprs = far_targets.iter().map(|&t| tpr_from_rates(&th, &r, t, sp.neg_scores.len())).collect();
    let roc = roc_on_grid(&sp, &roc_grid())?;
    let desideratum_margin = desideratum_audit(features, labels, sim)?;
    let (clustering_accuracy, clustering_threshold) = match opts.cluster_threshold {
        Some(t) => (clustering_accuracy(&cluster_by_threshold(features, sim, t)?, labels)?, t),
        None => best_threshold_clustering(features, labels, sim)?,
    };
    Ok(EvalReport {
        eer,
        eer_threshold,
        tpr_at_far: tprs,
        roc,
        desideratum_margin,
        clustering_accuracy,
        clustering_threshold,
    })
}

/// Sorted distinct values, used by the brute-force oracle in tests.
#[cfg(test)]
fn distinct_sorted(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let set: std::collections::BTreeSet<u64> = v.map(order_key).collect();
    set.into_iter().map(from_order_key).collect()
}

#[cfg(test)]
fn order_key(x: f64) -> u64 {
    let b = (x + 0.0).to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | 1 << 63
    }
}

#[cfg(test)]
fn from_order_key(k: u64) -> f64 {
    f64::from_bits(if k >> 63 == 1 { k & !(1 << 63) } else { !k })
}

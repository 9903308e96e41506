//! Ranking metrics (MAP, MRR, average recall, accuracy) and a paired
//! approximate-randomization significance test over per-query AP.
//!
//! Groups with no relevant candidate are left out of MAP, MRR and AvgRec but
//! their pairs still count towards accuracy.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::RankedList;

pub const CUTOFF: usize = 10;

fn relevance(ranked: &RankedList) -> Vec<bool> {
    ranked.entries.iter().map(|e| e.gold_relevant).collect()
}

fn total_relevant(rel: &[bool]) -> usize {
    rel.iter().filter(|r| **r).count()
}

/// Sum of precision at each relevant position within `cutoff`, divided by
/// `min(R, cutoff)`. `None` when the group has no relevant candidate.
pub fn average_precision(ranked: &RankedList, cutoff: usize) -> Option<f64> {
    let rel = relevance(ranked);
    let r = total_relevant(&rel);
    if r == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &is_rel) in rel.iter().take(cutoff).enumerate() {
        if is_rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / r.min(cutoff) as f64)
}

/// `1 / rank` of the first relevant candidate within `cutoff`, else 0.
pub fn reciprocal_rank(ranked: &RankedList, cutoff: usize) -> Option<f64> {
    let rel = relevance(ranked);
    if total_relevant(&rel) == 0 {
        return None;
    }
    Some(
        rel.iter()
            .take(cutoff)
            .position(|r| *r)
            .map_or(0.0, |p| 1.0 / (p + 1) as f64),
    )
}

/// Mean of Recall@1..=cutoff.
pub fn average_recall(ranked: &RankedList, cutoff: usize) -> Option<f64> {
    let rel = relevance(ranked);
    let r = total_relevant(&rel);
    if r == 0 || cutoff == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for c in 0..cutoff {
        if rel.get(c).copied().unwrap_or(false) {
            hits += 1;
        }
        sum += hits as f64 / r as f64;
    }
    Some(sum / cutoff as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_score: f64,
    pub mrr: f64,
    pub avg_rec: f64,
    /// `None` when the rankings carry no class decisions (baselines).
    pub accuracy: Option<f64>,
    pub per_query_ap: BTreeMap<String, f64>,
    pub n_queries_scored: usize,
    pub n_groups: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores a set of rankings over disjoint groups. All metrics are on a
/// 0-100 scale.
pub fn evaluate(rankings: &[RankedList]) -> Result<EvalReport> {
    let mut seen = HashSet::new();
    for r in rankings {
        if !seen.insert(r.group_id.as_str()) {
            return Err(Error::DuplicateGroup(r.group_id.clone()));
        }
    }
    // Reduce in group-id order so the result does not depend on input order.
    let mut ordered: Vec<&RankedList> = rankings.iter().collect();
    ordered.sort_by(|a, b| a.group_id.cmp(&b.group_id));

    let per_query_ap: BTreeMap<String, f64> = ordered
        .iter()
        .filter_map(|r| average_precision(r, CUTOFF).map(|ap| (r.group_id.clone(), ap)))
        .collect();
    let map_score = 100.0 * mean(per_query_ap.values().copied());
    let mrr = 100.0 * mean(ordered.iter().filter_map(|r| reciprocal_rank(r, CUTOFF)));
    let avg_rec = 100.0 * mean(ordered.iter().filter_map(|r| average_recall(r, CUTOFF)));

    let decisions: Vec<(bool, Option<bool>)> = ordered
        .iter()
        .flat_map(|r| r.entries.iter().map(|e| (e.gold_relevant, e.predicted_relevant)))
        .collect();
    let accuracy = if !decisions.is_empty() && decisions.iter().all(|(_, p)| p.is_some()) {
        let correct = decisions.iter().filter(|(g, p)| Some(*g) == *p).count();
        Some(100.0 * correct as f64 / decisions.len() as f64)
    } else {
        None
    };

    Ok(EvalReport {
        map_score,
        mrr,
        avg_rec,
        accuracy,
        n_queries_scored: per_query_ap.len(),
        n_groups: rankings.len(),
        per_query_ap,
    })
}

impl EvalReport {
    /// Plain-text table with one row per metric.
    pub fn to_table(&self, title: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{title}");
        let _ = writeln!(out, "  {:<8} {:>7}", "metric", "score");
        let _ = writeln!(out, "  {:<8} {:>7.2}", "MAP", self.map_score);
        let _ = writeln!(out, "  {:<8} {:>7.2}", "MRR", self.mrr);
        let _ = writeln!(out, "  {:<8} {:>7.2}", "AvgRec", self.avg_rec);
        match self.accuracy {
            Some(acc) => {
                let _ = writeln!(out, "  {:<8} {:>7.2}", "Acc", acc);
            }
            None => {
                let _ = writeln!(out, "  {:<8} {:>7}", "Acc", "-");
            }
        }
        let _ = writeln!(out, "  scored {} of {} queries", self.n_queries_scored, self.n_groups);
        out
    }

    /// Field-wise mean of several reports (e.g. the random baseline over
    /// seeds). Per-query AP is averaged key-wise.
    pub fn mean_of(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let accuracy = reports
            .iter()
            .map(|r| r.accuracy)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n);
        let per_query_ap = first
            .per_query_ap
            .keys()
            .map(|k| {
                let v = reports.iter().filter_map(|r| r.per_query_ap.get(k)).sum::<f64>() / n;
                (k.clone(), v)
            })
            .collect();
        Some(EvalReport {
            map_score: avg(|r| r.map_score),
            mrr: avg(|r| r.mrr),
            avg_rec: avg(|r| r.avg_rec),
            accuracy,
            per_query_ap,
            n_queries_scored: first.n_queries_scored,
            n_groups: first.n_groups,
        })
    }
}

/// Two-sided approximate randomization test on paired per-query scores.
/// Each iteration swaps every query's pair with probability 1/2; the p-value
/// is `(#{|mean diff| >= observed} + 1) / (iterations + 1)`.
pub fn paired_randomization_test(
    per_query_a: &BTreeMap<String, f64>,
    per_query_b: &BTreeMap<String, f64>,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if per_query_a.len() != per_query_b.len() || per_query_a.keys().any(|k| !per_query_b.contains_key(k)) {
        return Err(Error::KeyMismatch);
    }
    // BTreeMap iteration is key-sorted, so differences line up by query.
    let diffs: Vec<f64> = per_query_a.iter().map(|(k, a)| a - per_query_b[k]).collect();
    if diffs.is_empty() {
        return Ok(1.0);
    }
    let n = diffs.len() as f64;
    let observed = (diffs.iter().sum::<f64>() / n).abs();
    // Absorbs summation-order rounding when a shuffled statistic ties the
    // observed one.
    let tolerance = 1e-12 * observed.max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least = 0usize;
    for _ in 0..iterations {
        let stat: f64 = diffs.iter().map(|d| if rng.gen::<bool>() { -d } else { *d }).sum::<f64>() / n;
        if stat.abs() >= observed - tolerance {
            at_least += 1;
        }
    }
    Ok((at_least + 1) as f64 / (iterations + 1) as f64)
}

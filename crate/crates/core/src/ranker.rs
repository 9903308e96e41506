//! Candidate ranking by model score, plus the retrieval-order and random
//! baselines.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::RankingGroup;
use crate::distances::{FeatureVector, Featurizer};
use crate::error::{Error, Result};
use crate::neuralnet::MlpModel;
use crate::training::{feature_matrix, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Model,
    IrOrder,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub pair_id: String,
    pub score: f64,
    pub gold_relevant: bool,
    pub orig_rank: u32,
    /// Argmax class decision, present only for model rankings.
    pub predicted_relevant: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub group_id: String,
    pub entries: Vec<RankedEntry>,
    pub provenance: Provenance,
}

/// A ranking group with one feature vector per candidate, aligned by index.
#[derive(Debug, Clone)]
pub struct FeaturizedGroup {
    pub group: RankingGroup,
    pub features: Vec<FeatureVector>,
}

impl FeaturizedGroup {
    pub fn new(group: RankingGroup, featurizer: &Featurizer) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = group
            .candidates
            .iter()
            .map(|c| (group.original_text.as_str(), c.text.as_str()))
            .collect();
        let features = featurizer.features_many(&pairs)?;
        Ok(FeaturizedGroup { group, features })
    }

    /// Looks up each candidate's features by `pair_id`.
    pub fn from_lookup(group: RankingGroup, lookup: impl Fn(&str) -> Option<FeatureVector>) -> Result<Self> {
        let features = group
            .candidates
            .iter()
            .map(|c| lookup(&c.pair_id).ok_or_else(|| Error::Config(format!("no cached features for pair `{}`", c.pair_id))))
            .collect::<Result<_>>()?;
        Ok(FeaturizedGroup { group, features })
    }
}

/// Scores with a checkpointed model after checking its featurizer fingerprint.
pub fn rank_group(model: &TrainedModel, group: &RankingGroup, featurizer: &Featurizer) -> Result<RankedList> {
    let warnings = model.fingerprint_warnings(&featurizer.fingerprint());
    if !warnings.is_empty() {
        return Err(Error::FingerprintMismatch(warnings.join("; ")));
    }
    rank_featurized(&model.model, &FeaturizedGroup::new(group.clone(), featurizer)?)
}

/// Sorts candidates by probability of the relevant class, breaking ties by
/// original rank and then pair id.
pub fn rank_featurized(model: &MlpModel, group: &FeaturizedGroup) -> Result<RankedList> {
    let task = model.main_task;
    if model.class_count(task)? != 2 {
        return Err(Error::Dimension(format!("main task {task} is not binary")));
    }
    if group.features.len() != group.group.candidates.len() {
        return Err(Error::Dimension("features do not align with candidates".into()));
    }
    let entries = if group.features.is_empty() {
        Vec::new()
    } else {
        let x = feature_matrix(&model.config.features.mask, &group.features);
        let probs = model.predict(&x, task)?;
        group
            .group
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = probs.row(i);
                RankedEntry {
                    pair_id: c.pair_id.clone(),
                    score: p[1],
                    gold_relevant: c.gold_relevant,
                    orig_rank: c.orig_rank,
                    predicted_relevant: Some(p[1] > p[0]),
                }
            })
            .collect()
    };
    let mut list = RankedList {
        group_id: group.group.group_id.clone(),
        entries,
        provenance: Provenance::Model,
    };
    list.entries.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.orig_rank.cmp(&b.orig_rank))
            .then_with(|| a.pair_id.cmp(&b.pair_id))
    });
    Ok(list)
}

/// Original retrieval order, scored `1 / orig_rank`.
pub fn ir_baseline(group: &RankingGroup) -> RankedList {
    let mut entries: Vec<RankedEntry> = group
        .candidates
        .iter()
        .map(|c| RankedEntry {
            pair_id: c.pair_id.clone(),
            score: 1.0 / c.orig_rank as f64,
            gold_relevant: c.gold_relevant,
            orig_rank: c.orig_rank,
            predicted_relevant: None,
        })
        .collect();
    entries.sort_by(|a, b| a.orig_rank.cmp(&b.orig_rank).then_with(|| a.pair_id.cmp(&b.pair_id)));
    RankedList {
        group_id: group.group_id.clone(),
        entries,
        provenance: Provenance::IrOrder,
    }
}

fn group_seed(group_id: &str, seed: u64) -> u64 {
    let digest = Sha256::new().chain_update(group_id.as_bytes()).chain_update(seed.to_le_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Uniformly random permutation, fixed by `(group_id, seed)`.
pub fn random_baseline(group: &RankingGroup, seed: u64) -> RankedList {
    let mut candidates: Vec<_> = group.candidates.iter().collect();
    // Start from rank order so the permutation ignores input order.
    candidates.sort_by(|a, b| a.orig_rank.cmp(&b.orig_rank).then_with(|| a.pair_id.cmp(&b.pair_id)));
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(group_seed(&group.group_id, seed)));
    let n = candidates.len() as f64;
    let entries = candidates
        .into_iter()
        .enumerate()
        .map(|(pos, c)| RankedEntry {
            pair_id: c.pair_id.clone(),
            score: (n - pos as f64) / n,
            gold_relevant: c.gold_relevant,
            orig_rank: c.orig_rank,
            predicted_relevant: None,
        })
        .collect();
    RankedList {
        group_id: group.group_id.clone(),
        entries,
        provenance: Provenance::Random,
    }
}

/// Tab-separated `group_id pair_id rank score gold` lines, rank starting at 1.
pub fn write_rankings(lists: &[RankedList], mut w: impl Write) -> std::io::Result<()> {
    for list in lists {
        for (pos, e) in list.entries.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{}\t{}", list.group_id, e.pair_id, pos + 1, e.score, e.gold_relevant)?;
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::corpus::Candidate;
    use crate::training::TaskStream;

    /// Chops a binary stream into ranking groups of `size` candidates.
    pub fn groups_from_stream(stream: &TaskStream, size: usize) -> Vec<FeaturizedGroup> {
        stream
            .examples
            .chunks(size)
            .enumerate()
            .map(|(g, chunk)| FeaturizedGroup {
                group: RankingGroup {
                    group_id: format!("G{g}"),
                    original_text: String::new(),
                    candidates: chunk
                        .iter()
                        .enumerate()
                        .map(|(i, e)| Candidate {
                            pair_id: format!("G{g}_{i}"),
                            text: String::new(),
                            gold_relevant: e.label.class_index == 1,
                            orig_rank: i as u32 + 1,
                        })
                        .collect(),
                },
                features: chunk.iter().map(|e| e.features.clone()).collect(),
            })
            .collect()
    }
}

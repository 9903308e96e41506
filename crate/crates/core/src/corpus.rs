//! Pair records, ranking groups and auxiliary-task sampling.
//!
//! Datasets are stored one JSON object per line:
//!
//! ```text
//! {"task":"qq","group_id":"Q1","pair_id":"Q1_R1","text_a":"...","text_b":"...","label":"Relevant","orig_rank":1}
//! ```
//!
//! `orig_rank` is required for `qq` records and omitted elsewhere.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    /// Question-question relevancy (the main ranking task).
    Qq,
    /// Question-comment relevancy.
    Qa,
    /// Natural language inference.
    Nli,
    /// Fake news stance detection.
    Fnc,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Qq, TaskId::Qa, TaskId::Nli, TaskId::Fnc];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Qq => "qq",
            TaskId::Qa => "qa",
            TaskId::Nli => "nli",
            TaskId::Fnc => "fnc",
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            TaskId::Qq | TaskId::Qa => 2,
            TaskId::Nli => 3,
            TaskId::Fnc => 4,
        }
    }

    pub fn admissible_labels(self) -> &'static [&'static str] {
        match self {
            TaskId::Qq => &["PerfectMatch", "Relevant", "Irrelevant"],
            TaskId::Qa => &["Good", "PotentiallyUseful", "Bad"],
            TaskId::Nli => &["entailment", "neutral", "contradiction"],
            TaskId::Fnc => &["agrees", "disagrees", "discusses", "unrelated"],
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

fn label_class(task: TaskId, raw: &str) -> Option<usize> {
    let class = match (task, raw) {
        (TaskId::Qq, "PerfectMatch" | "Relevant") => 1,
        (TaskId::Qq, "Irrelevant") => 0,
        (TaskId::Qa, "Good") => 1,
        // The official subtask A scorer binarizes PotentiallyUseful as negative.
        (TaskId::Qa, "Bad" | "PotentiallyUseful") => 0,
        (TaskId::Nli, "entailment") => 0,
        (TaskId::Nli, "neutral") => 1,
        (TaskId::Nli, "contradiction") => 2,
        (TaskId::Fnc, "agrees") => 0,
        (TaskId::Fnc, "disagrees") => 1,
        (TaskId::Fnc, "discusses") => 2,
        (TaskId::Fnc, "unrelated") => 3,
        _ => return None,
    };
    Some(class)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Label {
    pub class_index: usize,
    pub class_count: usize,
}

impl Label {
    pub fn new(class_index: usize, class_count: usize) -> Result<Self> {
        if class_index >= class_count {
            return Err(Error::LabelOutOfRange {
                index: class_index,
                count: class_count,
            });
        }
        Ok(Label {
            class_index,
            class_count,
        })
    }
}

/// Maps a dataset label onto the model's class index for `task`.
pub fn map_label(raw_label: &str, task: TaskId) -> Result<Label> {
    let class_index = label_class(task, raw_label).ok_or_else(|| Error::InadmissibleLabel {
        label: raw_label.to_string(),
        task,
        admissible: task.admissible_labels(),
    })?;
    Label::new(class_index, task.class_count())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    #[serde(rename = "task")]
    pub task_id: TaskId,
    pub group_id: String,
    pub pair_id: String,
    pub text_a: String,
    pub text_b: String,
    #[serde(rename = "label")]
    pub raw_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orig_rank: Option<u32>,
}

impl PairRecord {
    pub fn label(&self) -> Result<Label> {
        map_label(&self.raw_label, self.task_id)
    }

    fn validate(&self) -> Result<()> {
        self.label()?;
        if self.task_id == TaskId::Qq
            && (self.group_id.is_empty() || !matches!(self.orig_rank, Some(r) if r >= 1))
        {
            return Err(Error::MissingRanking(self.pair_id.clone()));
        }
        if self.orig_rank == Some(0) {
            return Err(Error::MissingRanking(self.pair_id.clone()));
        }
        Ok(())
    }
}

/// Reads a dataset file, checking every record against `task`.
pub fn load_pairs(path: impl AsRef<Path>, task: TaskId) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pairs(BufReader::new(file), task, path)
}

pub fn read_pairs(reader: impl BufRead, task: TaskId, origin: &Path) -> Result<Vec<PairRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let parse_err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: line_no,
            message,
        };
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PairRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.task_id != task {
            return Err(parse_err(format!(
                "record has task {} but {} was expected",
                record.task_id, task
            )));
        }
        record.validate().map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(record.pair_id.clone()) {
            return Err(parse_err(
                Error::DuplicatePairId(record.pair_id.clone()).to_string(),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_pairs(records: &[PairRecord], writer: impl Write) -> std::io::Result<()> {
    let mut writer = BufWriter::new(writer);
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_pairs(records: &[PairRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_pairs(records, file).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub pair_id: String,
    pub text: String,
    pub gold_relevant: bool,
    pub orig_rank: u32,
}

/// An original question with its candidates in original retrieval order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingGroup {
    pub group_id: String,
    pub original_text: String,
    pub candidates: Vec<Candidate>,
}

/// Groups main-task records by `group_id`, keeping first-appearance order
/// of groups and sorting candidates by `orig_rank`.
pub fn group_records(records: &[PairRecord]) -> Result<Vec<RankingGroup>> {
    let mut groups: Vec<RankingGroup> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut ranks: HashMap<&str, HashSet<u32>> = HashMap::new();

    for record in records {
        if record.task_id != TaskId::Qq {
            return Err(Error::MixedTasks {
                expected: TaskId::Qq,
                found: record.task_id,
            });
        }
        let rank = record
            .orig_rank
            .ok_or_else(|| Error::MissingRanking(record.pair_id.clone()))?;
        if !ranks.entry(&record.group_id).or_default().insert(rank) {
            return Err(Error::DuplicateRank {
                group: record.group_id.clone(),
                rank,
            });
        }
        let idx = *slot.entry(&record.group_id).or_insert_with(|| {
            groups.push(RankingGroup {
                group_id: record.group_id.clone(),
                original_text: record.text_a.clone(),
                candidates: Vec::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[idx];
        if group.original_text != record.text_a {
            return Err(Error::GroupTextMismatch(record.group_id.clone()));
        }
        group.candidates.push(Candidate {
            pair_id: record.pair_id.clone(),
            text: record.text_b.clone(),
            gold_relevant: record.label()?.class_index == 1,
            orig_rank: rank,
        });
    }

    for group in &mut groups {
        group.candidates.sort_by_key(|c| c.orig_rank);
    }
    Ok(groups)
}

/// Draws `n` records uniformly without replacement. The sample keeps the
/// input's relative order and depends only on `(records, n, seed)`.
pub fn sample_auxiliary(records: &[PairRecord], n: usize, seed: u64) -> Result<Vec<PairRecord>> {
    if n > records.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: records.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| records[i].clone()).collect())
}

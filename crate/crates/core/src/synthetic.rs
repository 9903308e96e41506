//! Generated datasets for smoke tests, examples and the acceptance suite.
//!
//! Relevant candidates reuse several words of their original question;
//! irrelevant ones are drawn from the whole vocabulary. Auxiliary tasks get
//! labels tied to word overlap in the same way.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{save_pairs, PairRecord, TaskId};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub candidates_per_group: usize,
    pub words_per_question: usize,
    /// Words a relevant candidate copies from its original question.
    pub shared_words: usize,
    pub vocab_size: usize,
    pub relevant_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            groups: 500,
            candidates_per_group: 10,
            words_per_question: 8,
            shared_words: 5,
            vocab_size: 3000,
            relevant_rate: 0.3,
            seed: 0,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

fn random_words(rng: &mut ChaCha8Rng, vocab: usize, n: usize) -> Vec<String> {
    (0..n).map(|_| word(rng.gen_range(0..vocab))).collect()
}

fn sentence(words: &[String]) -> String {
    let mut s = words.join(" ");
    s.push('?');
    s
}

/// Candidate text sharing `shared` words with `original`.
fn overlapping(rng: &mut ChaCha8Rng, original: &[String], shared: usize, len: usize, vocab: usize) -> Vec<String> {
    let mut words: Vec<String> = original.choose_multiple(rng, shared.min(original.len())).cloned().collect();
    words.extend(random_words(rng, vocab, len.saturating_sub(words.len())));
    words.shuffle(rng);
    words
}

/// Question-question ranking records with ids `{prefix}{g}` and
/// `{prefix}{g}_R{rank}`. Original ranks are a random permutation.
pub fn qq_records(spec: &SyntheticSpec, prefix: &str) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.groups * spec.candidates_per_group);
    for g in 0..spec.groups {
        let group_id = format!("{prefix}{g}");
        let original = random_words(&mut rng, spec.vocab_size, spec.words_per_question);
        let mut ranks: Vec<u32> = (1..=spec.candidates_per_group as u32).collect();
        ranks.shuffle(&mut rng);
        for rank in ranks {
            let relevant = rng.gen_bool(spec.relevant_rate);
            let words = if relevant {
                overlapping(&mut rng, &original, spec.shared_words, spec.words_per_question, spec.vocab_size)
            } else {
                random_words(&mut rng, spec.vocab_size, spec.words_per_question)
            };
            out.push(PairRecord {
                task_id: TaskId::Qq,
                group_id: group_id.clone(),
                pair_id: format!("{group_id}_R{rank}"),
                text_a: sentence(&original),
                text_b: sentence(&words),
                raw_label: if relevant { "Relevant" } else { "Irrelevant" }.into(),
                orig_rank: Some(rank),
            });
        }
    }
    out
}

/// Auxiliary-task records whose label is determined by word overlap.
pub fn aux_records(task: TaskId, n: usize, spec: &SyntheticSpec) -> Vec<PairRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xA0A0 ^ task as u64);
    let labels = task.admissible_labels();
    let len = spec.words_per_question;
    (0..n)
        .map(|i| {
            let class = rng.gen_range(0..labels.len());
            let a = random_words(&mut rng, spec.vocab_size, len);
            // Labels listed earlier share more words.
            let shared = len * (labels.len() - 1 - class) / labels.len().max(1);
            let b = overlapping(&mut rng, &a, shared, len, spec.vocab_size);
            PairRecord {
                task_id: task,
                group_id: String::new(),
                pair_id: format!("{task}-{i}"),
                text_a: sentence(&a),
                text_b: sentence(&b),
                raw_label: labels[class].to_string(),
                orig_rank: None,
            }
        })
        .collect()
}

/// Random embedding vectors for the first `vocab_size` words.
pub fn embedding_entries(vocab_size: usize, dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..vocab_size)
        .map(|i| (word(i), (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect()
}

/// Writes entries in the embedding text format with a `count dim` header.
pub fn write_embeddings(entries: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let dim = entries.first().map_or(0, |e| e.1.len());
    writeln!(w, "{} {}", entries.len(), dim).map_err(io)?;
    for (token, v) in entries {
        write!(w, "{token}").map_err(io)?;
        for x in v {
            write!(w, " {x}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes a complete synthetic workspace into `dir`: question-question
/// train/dev/test splits, QA, NLI and FNC auxiliary data, an embedding table
/// and a `config.toml` pointing at them. Returns the config path.
pub fn write_workspace(dir: impl AsRef<Path>, spec: &SyntheticSpec, aux_size: usize) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let held_out = |seed_offset: u64| SyntheticSpec {
        groups: (spec.groups / 5).max(1),
        seed: spec.seed.wrapping_add(seed_offset),
        ..spec.clone()
    };
    save_pairs(&qq_records(spec, "T"), dir.join("train.jsonl"))?;
    save_pairs(&qq_records(&held_out(1), "D"), dir.join("dev.jsonl"))?;
    save_pairs(&qq_records(&held_out(2), "E"), dir.join("test.jsonl"))?;
    for task in [TaskId::Qa, TaskId::Nli, TaskId::Fnc] {
        save_pairs(&aux_records(task, aux_size, spec), dir.join(format!("{task}.jsonl")))?;
    }
    write_embeddings(&embedding_entries(spec.vocab_size, 20, spec.seed), dir.join("embeddings.txt"))?;
    let config = dir.join("config.toml");
    let text = "output_dir = \"out\"\nembeddings = \"embeddings.txt\"\n\n[data]\ntrain = \"train.jsonl\"\ndev = \"dev.jsonl\"\ntest = \"test.jsonl\"\nqa = \"qa.jsonl\"\nnli = \"nli.jsonl\"\nfnc = \"fnc.jsonl\"\n";
    fs::write(&config, text).map_err(|e| Error::io(&config, e))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::group_records;

    #[test]
    fn qq_shape() {
        let spec = SyntheticSpec { groups: 20, ..Default::default() };
        let recs = qq_records(&spec, "S");
        assert_eq!(recs.len(), 200);
        let groups = group_records(&recs).unwrap();
        assert_eq!(groups.len(), 20);
        assert!(groups.iter().all(|g| g.candidates.len() == 10));
        assert_eq!(qq_records(&spec, "S"), recs);
    }

    #[test]
    fn aux_labels_admissible() {
        let spec = SyntheticSpec::default();
        for task in [TaskId::Qa, TaskId::Nli, TaskId::Fnc] {
            for r in aux_records(task, 50, &spec) {
                r.label().unwrap();
            }
        }
    }
}

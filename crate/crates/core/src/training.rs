//! Single- and multi-task training loops, learning curves and checkpoints.
//!
//! Every epoch reshuffles each stream with seed `config.seed + shuffle_seed +
//! epoch` and then walks main-task batches in order, following each main batch
//! with one batch from every auxiliary stream in turn. Auxiliary streams wrap
//! around when they run out; the epoch ends when the main stream does.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Label, PairRecord, TaskId};
use crate::distances::{slot_name, FeatureMask, FeatureVector, Featurizer, FeaturizerFingerprint, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::neuralnet::{init_model_for, sgd_step, Matrix, MlpModel, TrainConfig, Velocity};
use crate::ranker::{rank_featurized, FeaturizedGroup};

pub const CHECKPOINT_FORMAT: &str = "qrank-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    pub label: Label,
}

/// Featurized, labelled examples of one task.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub task: TaskId,
    pub examples: Vec<Example>,
    pub shuffle_seed: u64,
    pub featurizer: Option<FeaturizerFingerprint>,
}

impl TaskStream {
    pub fn new(task: TaskId, examples: Vec<Example>, shuffle_seed: u64) -> Result<Self> {
        let classes = task.class_count();
        if let Some(bad) = examples.iter().find(|e| e.label.class_count != classes) {
            return Err(Error::LabelOutOfRange {
                index: bad.label.class_index,
                count: classes,
            });
        }
        if let Some(first) = examples.first() {
            if examples.iter().any(|e| e.features.mask != first.features.mask) {
                return Err(Error::MaskMismatch);
            }
        }
        Ok(TaskStream {
            task,
            examples,
            shuffle_seed,
            featurizer: None,
        })
    }

    /// Featurizes `records` (all of `task`) with `featurizer`.
    pub fn from_records(task: TaskId, records: &[PairRecord], featurizer: &Featurizer, shuffle_seed: u64) -> Result<Self> {
        let pairs: Vec<(&str, &str)> = records.iter().map(|r| (r.text_a.as_str(), r.text_b.as_str())).collect();
        let features = featurizer.features_many(&pairs)?;
        let examples = records
            .iter()
            .zip(features)
            .map(|(r, features)| {
                if r.task_id != task {
                    return Err(Error::MixedTasks { expected: task, found: r.task_id });
                }
                Ok(Example { features, label: r.label()? })
            })
            .collect::<Result<_>>()?;
        let mut stream = TaskStream::new(task, examples, shuffle_seed)?;
        stream.featurizer = Some(featurizer.fingerprint());
        Ok(stream)
    }

    /// Re-masks every example.
    pub fn with_mask(mut self, mask: FeatureMask) -> Self {
        for e in &mut self.examples {
            e.features = e.features.clone().masked(mask);
        }
        if let Some(fp) = &mut self.featurizer {
            fp.options.mask = mask;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn mask(&self) -> Option<FeatureMask> {
        self.examples.first().map(|e| e.features.mask)
    }

    /// Content hash over labels and feature bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.task.as_str());
        for e in &self.examples {
            h.update((e.label.class_index as u64).to_le_bytes());
            for v in e.features.values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    fn subset(&self, indices: &[usize]) -> TaskStream {
        TaskStream {
            task: self.task,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            shuffle_seed: self.shuffle_seed,
            featurizer: self.featurizer.clone(),
        }
    }
}

/// Model input rows: the `mask`-active slots of each feature vector.
pub fn feature_matrix<'a>(mask: &FeatureMask, rows: impl IntoIterator<Item = &'a FeatureVector>) -> Matrix {
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|fv| mask.active_slots().map(|i| fv.values[i]).collect())
        .collect();
    if rows.is_empty() {
        return Matrix::zeros(0, mask.count());
    }
    Matrix::from_rows(&rows).expect("rows share the mask width")
}

/// Mean batch loss per epoch, per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_loss: BTreeMap<TaskId, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub featurizer: Option<FeaturizerFingerprint>,
    pub datasets: BTreeMap<TaskId, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: MlpModel,
    pub log: TrainingLog,
    pub provenance: Provenance,
}

impl TrainedModel {
    /// Differences between the featurizer the model was trained with and
    /// `current`. Models trained without a recorded fingerprint never warn.
    pub fn fingerprint_warnings(&self, current: &FeaturizerFingerprint) -> Vec<String> {
        match &self.provenance.featurizer {
            Some(fp) => fp.differences(current),
            None => Vec::new(),
        }
    }

    /// Writes `epoch task loss` lines followed by a provenance block.
    pub fn write_log(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# epoch\ttask\tmean_batch_loss")?;
        let epochs = self.log.epoch_loss.values().map(Vec::len).max().unwrap_or(0);
        for epoch in 0..epochs {
            for (task, losses) in &self.log.epoch_loss {
                if let Some(l) = losses.get(epoch) {
                    writeln!(w, "{}\t{}\t{}", epoch + 1, task, l)?;
                }
            }
        }
        writeln!(w, "# provenance")?;
        let block = serde_json::to_string_pretty(&serde_json::json!({
            "config": self.model.config,
            "featurizer": self.provenance.featurizer,
            "datasets": self.provenance.datasets,
        }))
        .expect("provenance serializes");
        for line in block.lines() {
            writeln!(w, "# {line}")?;
        }
        Ok(())
    }
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Trains on `main` plus round-robin `aux` batches. With `aux` empty this is
/// plain single-task training.
pub fn train(config: &TrainConfig, main: &TaskStream, aux: &[TaskStream]) -> Result<TrainedModel> {
    config.validate()?;
    if main.is_empty() {
        return Err(Error::EmptyStream);
    }
    let aux_tasks: Vec<TaskId> = aux.iter().map(|s| s.task).collect();
    if aux_tasks != config.aux_tasks {
        return Err(Error::Config(format!(
            "auxiliary streams {:?} do not match configured aux tasks {:?}",
            aux_tasks, config.aux_tasks
        )));
    }
    let mask = config.features.mask;
    let streams: Vec<&TaskStream> = std::iter::once(main).chain(aux).collect();
    if streams.iter().any(|s| s.mask().is_some_and(|m| m != mask)) {
        return Err(Error::MaskMismatch);
    }
    let fingerprint = streams.iter().find_map(|s| s.featurizer.clone());
    if let Some(fp) = &fingerprint {
        for s in &streams {
            if let Some(other) = &s.featurizer {
                let diff = fp.differences(other);
                if !diff.is_empty() {
                    return Err(Error::FingerprintMismatch(diff.join("; ")));
                }
            }
        }
    }

    let class_counts: BTreeMap<TaskId, usize> = streams.iter().map(|s| (s.task, s.task.class_count())).collect();
    let mut model = init_model_for(config, main.task, &class_counts)?;
    let mut velocity = Velocity::zeros_like(&model);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);

    let inputs: Vec<Matrix> = streams
        .iter()
        .map(|s| feature_matrix(&mask, s.examples.iter().map(|e| &e.features)))
        .collect();
    let bs = config.batch_size;
    let main_batches = main.len().div_ceil(bs);
    let mut log = TrainingLog::default();

    for epoch in 0..config.epochs as u64 {
        let orders: Vec<Vec<usize>> = streams
            .iter()
            .map(|s| shuffled(s.len(), config.seed.wrapping_add(s.shuffle_seed).wrapping_add(epoch)))
            .collect();
        let mut losses: Vec<Vec<f64>> = vec![Vec::new(); streams.len()];
        for b in 0..main_batches {
            for (si, stream) in streams.iter().enumerate() {
                if stream.is_empty() {
                    continue;
                }
                let bi = b % stream.len().div_ceil(bs);
                let idx = &orders[si][bi * bs..((bi + 1) * bs).min(stream.len())];
                let rows: Vec<Vec<f64>> = idx.iter().map(|&i| inputs[si].row(i).to_vec()).collect();
                let batch = Matrix::from_rows(&rows)?;
                let labels: Vec<Label> = idx.iter().map(|&i| stream.examples[i].label).collect();
                let l = sgd_step(&mut model, &batch, &labels, stream.task, &mut velocity, config, &mut dropout_rng)?;
                losses[si].push(l);
            }
        }
        for (stream, l) in streams.iter().zip(losses) {
            let mean = if l.is_empty() { f64::NAN } else { l.iter().sum::<f64>() / l.len() as f64 };
            log.epoch_loss.entry(stream.task).or_default().push(mean);
        }
    }

    Ok(TrainedModel {
        model,
        log,
        provenance: Provenance {
            featurizer: fingerprint.map(|fp| fp.with_mask(mask)),
            datasets: streams.iter().map(|s| (s.task, s.fingerprint())).collect(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub seed: u64,
    pub train_size: usize,
    pub map_score: f64,
}

/// Trains on growing prefixes of a seeded shuffle of `main` and scores MAP on
/// `dev`. Rows come back fraction-major, then in `seeds` order.
pub fn learning_curve(
    config: &TrainConfig,
    main: &TaskStream,
    aux: &[TaskStream],
    dev: &[FeaturizedGroup],
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<CurvePoint>> {
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || fractions.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("fractions must be ascending values in (0, 1]".into()));
    }
    let cells: Vec<(f64, u64)> = fractions.iter().flat_map(|&f| seeds.iter().map(move |&s| (f, s))).collect();
    cells
        .par_iter()
        .map(|&(fraction, seed)| {
            let n = (fraction * main.len() as f64).ceil() as usize;
            if n == 0 {
                return Err(Error::EmptySubset(fraction));
            }
            let order = shuffled(main.len(), seed);
            let subset = main.subset(&order[..n.min(main.len())]);
            let cfg = TrainConfig { seed, ..config.clone() };
            let trained = train(&cfg, &subset, aux)?;
            let rankings = dev
                .iter()
                .map(|g| rank_featurized(&trained.model, g))
                .collect::<Result<Vec<_>>>()?;
            Ok(CurvePoint {
                fraction,
                seed,
                train_size: subset.len(),
                map_score: evaluate(&rankings)?.map_score,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    feature_order: Vec<String>,
    model: MlpModel,
    log: TrainingLog,
    provenance: Provenance,
}

pub fn checkpoint_to_string(model: &TrainedModel) -> String {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        feature_order: (0..NUM_FEATURES).map(slot_name).collect(),
        model: model.model.clone(),
        log: model.log.clone(),
        provenance: model.provenance.clone(),
    };
    // f64 values are written in shortest round-trip form, so parsing restores
    // the exact bits.
    let mut text = serde_json::to_string_pretty(&file).expect("checkpoint serializes");
    text.push('\n');
    text
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text, path)
}

pub fn checkpoint_from_str(text: &str, origin: &Path) -> Result<TrainedModel> {
    let json_err = |source| Error::Json { path: origin.to_path_buf(), source };
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Config(format!("{} is not a checkpoint", origin.display())));
    }
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(json_err)?;
    let canonical: Vec<String> = (0..NUM_FEATURES).map(slot_name).collect();
    if file.feature_order != canonical {
        return Err(Error::Dimension("checkpoint feature order differs from this build".into()));
    }
    file.model.validate()?;
    let epochs = file.model.config.epochs;
    if file.log.epoch_loss.len() != file.model.heads.len() || file.log.epoch_loss.values().any(|l| l.len() != epochs) {
        return Err(Error::Dimension("training log does not cover every task and epoch".into()));
    }
    Ok(TrainedModel {
        model: file.model,
        log: file.log,
        provenance: file.provenance,
    })
}

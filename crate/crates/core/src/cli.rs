//! Run configuration and the experiment commands behind the `qrank` binary.
//!
//! A run directory holds everything a command needs to be repeated:
//!
//! ```text
//! out/
//!   cache/featurizer.json     fingerprints of vocabularies, embeddings, options
//!   cache/vocab-*.txt
//!   cache/{split}.jsonl       pair records (aux tasks already sampled)
//!   cache/{split}.features    pair_id + 14 feature values
//!   {command}.config.toml     resolved configuration of the last run
//!   model-{setting}.json, train-{setting}.log, rankings-*.tsv, eval-*.json, ablate-*.tsv, curve-*.tsv
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{group_records, load_pairs, sample_auxiliary, save_pairs, Label, PairRecord, TaskId};
use crate::distances::{
    load_feature_cache, save_feature_cache, slot_name, CosineMode, FeatureMask, FeatureOptions, FeatureVector,
    Featurizer, FeaturizerFingerprint, JaccardMode, TrigramKind, FEATURE_GROUPS,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, paired_randomization_test, EvalReport};
use crate::neuralnet::{grad_check_with, init_model_for, Activation, Matrix, Mode, TrainConfig};
use crate::ranker::{ir_baseline, rank_featurized, random_baseline, write_rankings, FeaturizedGroup, RankedList};
use crate::textrep::load_embeddings;
use crate::training::{learning_curve, load_checkpoint, save_checkpoint, train, CurvePoint, Example, TaskStream};

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}
fn default_random_seeds() -> usize {
    50
}
fn default_iterations() -> usize {
    10_000
}
fn default_fractions() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Question-question training pairs; vocabularies are built from these.
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub nli: Option<PathBuf>,
    pub fnc: Option<PathBuf>,
}

impl DataPaths {
    fn aux(&self, task: TaskId) -> Option<&PathBuf> {
        match task {
            TaskId::Qq => None,
            TaskId::Qa => self.qa.as_ref(),
            TaskId::Nli => self.nli.as_ref(),
            TaskId::Fnc => self.fnc.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout: f64,
    pub shared_units: usize,
    pub task_units: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Auxiliary tasks for `train`; empty means single-task.
    pub aux: Vec<TaskId>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            dropout: d.dropout,
            shared_units: d.shared_units,
            task_units: d.task_units,
            activation: d.activation,
            seed: d.seed,
            aux: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub cosine: CosineMode,
    pub jaccard: JaccardMode,
    pub trigram: TrigramKind,
    /// Group names or slot names joined with `+`; all 14 slots when absent.
    pub select: Option<String>,
    /// Slot names removed after `select`.
    pub drop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurveSection {
    pub fractions: Vec<f64>,
    /// Auxiliary settings plotted next to single-task training. Defaults to
    /// `[train.aux]` when that is non-empty.
    pub aux_settings: Option<Vec<Vec<TaskId>>>,
}

impl Default for CurveSection {
    fn default() -> Self {
        CurveSection {
            fractions: default_fractions(),
            aux_settings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub embeddings: PathBuf,
    /// Seeds averaged over by `ablate` and `curve`.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_random_seeds")]
    pub random_baseline_seeds: usize,
    #[serde(default = "default_iterations")]
    pub significance_iterations: usize,
    /// Seed for drawing auxiliary samples of the main training size.
    #[serde(default)]
    pub aux_sample_seed: u64,
    pub data: DataPaths,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub curve: CurveSection,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as TOML and falls back to a string.
fn parse_override(spec: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a TOML config, applies `key=value` overrides and resolves
    /// relative paths against the config file's directory.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::from_toml(&text, base, overrides)
    }

    pub fn from_toml(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for spec in overrides {
            let (key, value) = parse_override(spec)?;
            set_dotted(&mut table, &key, value)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        resolve(base, &mut cfg.output_dir);
        resolve(base, &mut cfg.embeddings);
        let d = &mut cfg.data;
        resolve(base, &mut d.train);
        for p in [&mut d.dev, &mut d.test, &mut d.qa, &mut d.nli, &mut d.fnc].into_iter().flatten() {
            resolve(base, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.mask()?.ensure_nonempty()?;
        self.train_config(&self.train.aux)?.validate()
    }

    pub fn mask(&self) -> Result<FeatureMask> {
        let mut mask = match &self.features.select {
            Some(sel) => FeatureMask::from_selection(sel)?,
            None => FeatureMask::all(),
        };
        for name in &self.features.drop {
            let slot = (0..crate::distances::NUM_FEATURES)
                .find(|&i| slot_name(i) == *name)
                .ok_or_else(|| Error::UnknownFeature(name.clone()))?;
            mask = mask.without(slot);
        }
        Ok(mask)
    }

    fn options(&self, mask: FeatureMask) -> FeatureOptions {
        FeatureOptions {
            mask,
            cosine: self.features.cosine,
            jaccard: self.features.jaccard,
            trigram: self.features.trigram,
        }
    }

    /// The network configuration with the given auxiliary tasks.
    pub fn train_config(&self, aux: &[TaskId]) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            dropout: t.dropout,
            shared_units: t.shared_units,
            task_units: t.task_units,
            activation: t.activation,
            seed: t.seed,
            aux_tasks: aux.to_vec(),
            features: self.options(self.mask()?),
        })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.output_dir.join("cache")
    }

    fn snapshot(&self, command: &str) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))?;
        let path = self.output_dir.join(format!("{command}.config.toml"));
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// `stl`, or `mtl-` followed by the auxiliary task names.
pub fn setting_name(aux: &[TaskId]) -> String {
    if aux.is_empty() {
        "stl".into()
    } else {
        let names: Vec<&str> = aux.iter().map(|t| t.as_str()).collect();
        format!("mtl-{}", names.join("+"))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} file {} does not exist", path.display())))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Split name to task; the three question-question splits share one task.
fn split_task(split: &str) -> Result<TaskId> {
    match split {
        "train" | "dev" | "test" => Ok(TaskId::Qq),
        other => other.parse(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    /// Rows written per split, in cache order.
    pub rows: BTreeMap<String, usize>,
    pub fingerprint: FeaturizerFingerprint,
}

/// Featurizes every configured split into the cache directory.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    require_file(&cfg.embeddings, "embedding")?;
    let mut inputs: Vec<(String, TaskId, PathBuf)> = vec![("train".into(), TaskId::Qq, cfg.data.train.clone())];
    for (split, p) in [("dev", &cfg.data.dev), ("test", &cfg.data.test)] {
        if let Some(p) = p {
            inputs.push((split.into(), TaskId::Qq, p.clone()));
        }
    }
    for task in [TaskId::Qa, TaskId::Nli, TaskId::Fnc] {
        if let Some(p) = cfg.data.aux(task) {
            inputs.push((task.as_str().into(), task, p.clone()));
        }
    }
    for (split, _, p) in &inputs {
        require_file(p, split)?;
    }

    let mut records: Vec<(String, TaskId, Vec<PairRecord>)> = Vec::new();
    for (split, task, p) in inputs {
        let recs = load_pairs(&p, task)?;
        if task == TaskId::Qq {
            group_records(&recs)?;
        }
        records.push((split, task, recs));
    }
    let table = load_embeddings(&cfg.embeddings)?;

    let main_size = records[0].2.len();
    for (_, task, recs) in records.iter_mut() {
        if *task != TaskId::Qq {
            let n = main_size.min(recs.len());
            *recs = sample_auxiliary(recs, n, cfg.aux_sample_seed)?;
        }
    }

    let texts: Vec<&str> = records[0].2.iter().flat_map(|r| [r.text_a.as_str(), r.text_b.as_str()]).collect();
    let featurizer = Featurizer::fit(&texts, table, cfg.options(FeatureMask::all()))?;

    let dir = cfg.cache_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.snapshot("prepare")?;
    let fingerprint = featurizer.fingerprint();
    let fp_path = dir.join("featurizer.json");
    write_text(&fp_path, &(serde_json::to_string_pretty(&fingerprint).expect("fingerprint serializes") + "\n"))?;
    for (name, vocab) in [("unigram", &featurizer.unigram), ("trigram", &featurizer.trigram)] {
        let mut text = vocab.tokens().join("\n");
        text.push('\n');
        write_text(&dir.join(format!("vocab-{name}.txt")), &text)?;
    }

    let mut rows = BTreeMap::new();
    for (split, _, recs) in &records {
        let pairs: Vec<(&str, &str)> = recs.iter().map(|r| (r.text_a.as_str(), r.text_b.as_str())).collect();
        let features = featurizer.features_many(&pairs)?;
        let cache: Vec<(String, FeatureVector)> = recs.iter().map(|r| r.pair_id.clone()).zip(features).collect();
        save_pairs(recs, dir.join(format!("{split}.jsonl")))?;
        save_feature_cache(&cache, dir.join(format!("{split}.features")))?;
        rows.insert(split.clone(), recs.len());
    }
    Ok(PrepareSummary { rows, fingerprint })
}

/// A prepared split: records plus their features keyed by pair id.
struct Split {
    records: Vec<PairRecord>,
    features: HashMap<String, FeatureVector>,
}

struct Cache {
    dir: PathBuf,
    fingerprint: FeaturizerFingerprint,
}

impl Cache {
    fn open(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.cache_dir();
        let fp_path = dir.join("featurizer.json");
        if !fp_path.is_file() {
            return Err(Error::Config(format!("no prepared cache in {}; run `prepare` first", dir.display())));
        }
        let text = fs::read_to_string(&fp_path).map_err(|e| Error::io(&fp_path, e))?;
        let fingerprint: FeaturizerFingerprint =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: fp_path.clone(), source })?;
        let wanted = cfg.options(FeatureMask::all());
        if fingerprint.options != wanted {
            return Err(Error::FingerprintMismatch(format!(
                "cache was prepared with {:?}, config asks for {:?}; rerun `prepare`",
                fingerprint.options, wanted
            )));
        }
        Ok(Cache { dir, fingerprint })
    }

    fn has(&self, split: &str) -> bool {
        self.dir.join(format!("{split}.features")).is_file()
    }

    fn split(&self, split: &str) -> Result<Split> {
        if !self.has(split) {
            return Err(Error::Config(format!("split `{split}` was not prepared")));
        }
        let task = split_task(split)?;
        let records = load_pairs(self.dir.join(format!("{split}.jsonl")), task)?;
        let features: HashMap<String, FeatureVector> =
            load_feature_cache(self.dir.join(format!("{split}.features")))?.into_iter().collect();
        Ok(Split { records, features })
    }

    fn stream(&self, split: &str) -> Result<TaskStream> {
        let task = split_task(split)?;
        let s = self.split(split)?;
        let examples = s
            .records
            .iter()
            .map(|r| {
                let features = s.features.get(&r.pair_id).cloned().ok_or_else(|| missing(&r.pair_id))?;
                Ok(Example { features, label: r.label()? })
            })
            .collect::<Result<_>>()?;
        let mut stream = TaskStream::new(task, examples, task as u64)?;
        stream.featurizer = Some(self.fingerprint.clone());
        Ok(stream)
    }

    fn groups(&self, split: &str) -> Result<Vec<FeaturizedGroup>> {
        let s = self.split(split)?;
        group_records(&s.records)?
            .into_iter()
            .map(|g| FeaturizedGroup::from_lookup(g, |id| s.features.get(id).cloned()))
            .collect()
    }
}

fn missing(pair_id: &str) -> Error {
    Error::Config(format!("no cached features for pair `{pair_id}`"))
}

/// Prepared training streams: the main task and each available aux task.
struct Streams {
    main: TaskStream,
    aux: BTreeMap<TaskId, TaskStream>,
}

impl Streams {
    fn load(cache: &Cache, aux: &[TaskId]) -> Result<Self> {
        let main = cache.stream("train")?;
        let mut out = BTreeMap::new();
        for &task in aux {
            if !cache.has(task.as_str()) {
                return Err(Error::Config(format!("auxiliary task {task} has no prepared data")));
            }
            out.insert(task, cache.stream(task.as_str())?);
        }
        Ok(Streams { main, aux: out })
    }

    fn masked(&self, aux: &[TaskId], mask: FeatureMask) -> (TaskStream, Vec<TaskStream>) {
        (
            self.main.clone().with_mask(mask),
            aux.iter().map(|t| self.aux[t].clone().with_mask(mask)).collect(),
        )
    }
}

/// Trains on the prepared cache and writes `model-{setting}.json` plus its
/// run log. Returns the checkpoint path.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let cache = Cache::open(cfg)?;
    let aux = &cfg.train.aux;
    let config = cfg.train_config(aux)?;
    let streams = Streams::load(&cache, aux)?;
    let (main, aux_streams) = streams.masked(aux, config.features.mask);
    let trained = train(&config, &main, &aux_streams)?;
    cfg.snapshot("train")?;
    let name = setting_name(aux);
    let ckpt = cfg.output_dir.join(format!("model-{name}.json"));
    save_checkpoint(&trained, &ckpt)?;
    let log_path = cfg.output_dir.join(format!("train-{name}.log"));
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    trained.write_log(BufWriter::new(file)).map_err(|e| Error::io(&log_path, e))?;
    Ok(ckpt)
}

fn rank_with_checkpoint(cache: &Cache, checkpoint: &Path, split: &str) -> Result<Vec<RankedList>> {
    let trained = load_checkpoint(checkpoint)?;
    let warnings = trained.fingerprint_warnings(&cache.fingerprint.with_mask(trained.model.config.features.mask));
    if !warnings.is_empty() {
        return Err(Error::FingerprintMismatch(warnings.join("; ")));
    }
    cache
        .groups(split)?
        .iter()
        .map(|g| rank_featurized(&trained.model, g))
        .collect()
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// Writes `rankings-{model}-{split}.tsv` and returns its path.
pub fn cmd_rank(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<PathBuf> {
    let cache = Cache::open(cfg)?;
    let lists = rank_with_checkpoint(&cache, checkpoint, split)?;
    cfg.snapshot("rank")?;
    let path = cfg.output_dir.join(format!("rankings-{}-{split}.tsv", stem(checkpoint)));
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    write_rankings(&lists, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Ir,
    Random,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir" => Ok(Baseline::Ir),
            "random" => Ok(Baseline::Random),
            other => Err(Error::Config(format!("unknown baseline `{other}` (expected ir or random)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub name: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub a: String,
    pub b: String,
    pub p_value: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: String,
    pub systems: Vec<SystemReport>,
    pub significance: Option<Significance>,
}

impl Evaluation {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for s in &self.systems {
            out.push_str(&s.report.to_table(&format!("{} on {}", s.name, self.split)));
        }
        if let Some(sig) = &self.significance {
            let _ = writeln!(out, "{} vs {}: p = {:.4} ({} iterations)", sig.a, sig.b, sig.p_value, sig.iterations);
        }
        out
    }
}

/// Scores checkpoints and baselines on a prepared split. With exactly two
/// systems a paired randomization test over per-query AP is added. Writes
/// `eval-{split}-{systems}.json`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoints: &[PathBuf], baselines: &[Baseline], split: &str) -> Result<Evaluation> {
    if checkpoints.is_empty() && baselines.is_empty() {
        return Err(Error::Config("nothing to evaluate: give a checkpoint or a baseline".into()));
    }
    let cache = Cache::open(cfg)?;
    let mut systems = Vec::new();
    for ckpt in checkpoints {
        let lists = rank_with_checkpoint(&cache, ckpt, split)?;
        systems.push(SystemReport { name: stem(ckpt), report: evaluate(&lists)? });
    }
    if !baselines.is_empty() {
        let groups = cache.groups(split)?;
        for b in baselines {
            let report = match b {
                Baseline::Ir => SystemReport {
                    name: "ir".into(),
                    report: evaluate(&groups.iter().map(|g| ir_baseline(&g.group)).collect::<Vec<_>>())?,
                },
                Baseline::Random => {
                    let reports = (0..cfg.random_baseline_seeds.max(1) as u64)
                        .into_par_iter()
                        .map(|seed| evaluate(&groups.iter().map(|g| random_baseline(&g.group, seed)).collect::<Vec<_>>()))
                        .collect::<Result<Vec<_>>>()?;
                    SystemReport {
                        name: "random".into(),
                        report: EvalReport::mean_of(&reports).expect("at least one seed"),
                    }
                }
            };
            systems.push(report);
        }
    }
    let significance = if let [a, b] = systems.as_slice() {
        Some(Significance {
            a: a.name.clone(),
            b: b.name.clone(),
            p_value: paired_randomization_test(
                &a.report.per_query_ap,
                &b.report.per_query_ap,
                cfg.significance_iterations,
                0,
            )?,
            iterations: cfg.significance_iterations,
        })
    } else {
        None
    };
    let result = Evaluation { split: split.into(), systems, significance };
    cfg.snapshot("evaluate")?;
    let names: Vec<&str> = result.systems.iter().map(|s| s.name.as_str()).collect();
    let path = cfg.output_dir.join(format!("eval-{split}-{}.json", names.join("+")));
    write_text(&path, &(serde_json::to_string_pretty(&result).expect("report serializes") + "\n"))?;
    Ok(result)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellScore {
    pub map_mean: f64,
    pub map_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub feature_set: String,
    pub mask: FeatureMask,
    /// Keyed by setting name (`stl`, `mtl-qa`, ...).
    pub scores: BTreeMap<String, CellScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ablation {
    pub split: String,
    pub settings: Vec<String>,
    pub groups: Vec<AblationRow>,
    pub leave_one_out: Vec<AblationRow>,
}

fn ablation_table(title: &str, settings: &[String], rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "  {:<26}", "features");
    for s in settings {
        let _ = write!(out, " {:>22} {:>22}", format!("{s} MAP"), format!("{s} Acc"));
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "  {:<26}", r.feature_set);
        for s in settings {
            let c = &r.scores[s];
            let _ = write!(
                out,
                " {:>22} {:>22}",
                format!("{:.2} ± {:.2}", c.map_mean, c.map_std),
                format!("{:.2} ± {:.2}", c.acc_mean, c.acc_std)
            );
        }
        out.push('\n');
    }
    out
}

fn ablation_tsv(settings: &[String], rows: &[AblationRow]) -> String {
    let mut out = String::from("feature_set\tmask");
    for s in settings {
        let _ = write!(out, "\t{s}_map_mean\t{s}_map_std\t{s}_acc_mean\t{s}_acc_std");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{}\t{}", r.feature_set, r.mask);
        for s in settings {
            let c = &r.scores[s];
            let _ = write!(out, "\t{}\t{}\t{}\t{}", c.map_mean, c.map_std, c.acc_mean, c.acc_std);
        }
        out.push('\n');
    }
    out
}

impl Ablation {
    pub fn to_table(&self) -> String {
        let mut out = ablation_table(&format!("Feature groups ({})", self.split), &self.settings, &self.groups);
        out.push('\n');
        out.push_str(&ablation_table(
            &format!("Leave one feature out ({})", self.split),
            &self.settings,
            &self.leave_one_out,
        ));
        out
    }
}

/// The auxiliary setting used next to single-task runs: `train.aux` when set,
/// otherwise QA if it was prepared, otherwise none.
fn mtl_setting(cfg: &RunConfig, cache: &Cache) -> Option<Vec<TaskId>> {
    if !cfg.train.aux.is_empty() {
        Some(cfg.train.aux.clone())
    } else if cache.has(TaskId::Qa.as_str()) {
        Some(vec![TaskId::Qa])
    } else {
        None
    }
}

/// Trains one model per (feature set, setting, seed) and evaluates it on
/// `split`. Feature sets are the six representation groups and, for each
/// slot active under the configured mask, that mask without the slot.
pub fn cmd_ablate(cfg: &RunConfig, split: &str) -> Result<Ablation> {
    let base = cfg.mask()?;
    base.ensure_nonempty()?;
    let cache = Cache::open(cfg)?;
    let mut settings: Vec<Vec<TaskId>> = vec![Vec::new()];
    settings.extend(mtl_setting(cfg, &cache));
    let all_aux: Vec<TaskId> = settings.iter().flatten().copied().collect();
    let streams = Streams::load(&cache, &all_aux)?;
    let dev = cache.groups(split)?;

    let mut sets: Vec<(String, FeatureMask, bool)> = FEATURE_GROUPS
        .iter()
        .map(|g| FeatureMask::from_selection(g).map(|m| (g.to_string(), m, true)))
        .collect::<Result<_>>()?;
    for slot in base.active_slots() {
        sets.push((format!("-{}", slot_name(slot)), base.without(slot), false));
    }
    for (name, mask, _) in &sets {
        mask.ensure_nonempty()
            .map_err(|_| Error::Config(format!("feature set `{name}` leaves no active features")))?;
    }

    let cells: Vec<(usize, usize, u64)> = (0..sets.len())
        .flat_map(|f| (0..settings.len()).flat_map(move |s| cfg.seeds.iter().map(move |&seed| (f, s, seed))))
        .collect();
    let results: Vec<(usize, usize, f64, f64)> = cells
        .par_iter()
        .map(|&(f, s, seed)| {
            let aux = &settings[s];
            let mut config = cfg.train_config(aux)?;
            config.seed = seed;
            config.features.mask = sets[f].1;
            let (main, aux_streams) = streams.masked(aux, sets[f].1);
            let trained = train(&config, &main, &aux_streams)?;
            let lists = dev.iter().map(|g| rank_featurized(&trained.model, g)).collect::<Result<Vec<_>>>()?;
            let report = evaluate(&lists)?;
            Ok((f, s, report.map_score, report.accuracy.unwrap_or(f64::NAN)))
        })
        .collect::<Result<_>>()?;

    let names: Vec<String> = settings.iter().map(|a| setting_name(a)).collect();
    let rows: Vec<AblationRow> = sets
        .iter()
        .enumerate()
        .map(|(f, (name, mask, _))| {
            let scores = names
                .iter()
                .enumerate()
                .map(|(s, setting)| {
                    let maps: Vec<f64> = results.iter().filter(|r| r.0 == f && r.1 == s).map(|r| r.2).collect();
                    let accs: Vec<f64> = results.iter().filter(|r| r.0 == f && r.1 == s).map(|r| r.3).collect();
                    let (map_mean, map_std) = mean_std(&maps);
                    let (acc_mean, acc_std) = mean_std(&accs);
                    (setting.clone(), CellScore { map_mean, map_std, acc_mean, acc_std })
                })
                .collect();
            AblationRow { feature_set: name.clone(), mask: *mask, scores }
        })
        .collect();
    let (groups, loo): (Vec<_>, Vec<_>) = rows.into_iter().zip(&sets).partition(|(_, s)| s.2);
    let ablation = Ablation {
        split: split.into(),
        settings: names,
        groups: groups.into_iter().map(|r| r.0).collect(),
        leave_one_out: loo.into_iter().map(|r| r.0).collect(),
    };
    cfg.snapshot("ablate")?;
    write_text(&cfg.output_dir.join("ablate-groups.tsv"), &ablation_tsv(&ablation.settings, &ablation.groups))?;
    write_text(
        &cfg.output_dir.join("ablate-loo.tsv"),
        &ablation_tsv(&ablation.settings, &ablation.leave_one_out),
    )?;
    Ok(ablation)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveSummaryRow {
    pub fraction: f64,
    pub mean_map: f64,
    pub std_map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curve {
    pub setting: String,
    pub points: Vec<CurvePoint>,
    pub summary: Vec<CurveSummaryRow>,
}

/// Per-fraction mean and standard deviation of MAP over seeds.
pub fn summarize_curve(points: &[CurvePoint], fractions: &[f64]) -> Vec<CurveSummaryRow> {
    fractions
        .iter()
        .map(|&fraction| {
            let maps: Vec<f64> = points.iter().filter(|p| p.fraction == fraction).map(|p| p.map_score).collect();
            let (mean_map, std_map) = mean_std(&maps);
            CurveSummaryRow { fraction, mean_map, std_map }
        })
        .collect()
}

/// Learning curves for single-task training and each auxiliary setting.
/// Writes `curve-{setting}.tsv` (plot-ready summary) and
/// `curve-{setting}-runs.tsv` (every point).
pub fn cmd_curve(cfg: &RunConfig, split: &str) -> Result<Vec<Curve>> {
    let cache = Cache::open(cfg)?;
    let mut settings: Vec<Vec<TaskId>> = vec![Vec::new()];
    match &cfg.curve.aux_settings {
        Some(extra) => settings.extend(extra.iter().filter(|a| !a.is_empty()).cloned()),
        None if !cfg.train.aux.is_empty() => settings.push(cfg.train.aux.clone()),
        None => {}
    }
    let mut all_aux: Vec<TaskId> = settings.iter().flatten().copied().collect();
    all_aux.sort();
    all_aux.dedup();
    let streams = Streams::load(&cache, &all_aux)?;
    let dev = cache.groups(split)?;
    let fractions = &cfg.curve.fractions;

    let mut curves = Vec::new();
    for aux in &settings {
        let config = cfg.train_config(aux)?;
        let (main, aux_streams) = streams.masked(aux, config.features.mask);
        let points = learning_curve(&config, &main, &aux_streams, &dev, fractions, &cfg.seeds)?;
        curves.push(Curve {
            setting: setting_name(aux),
            summary: summarize_curve(&points, fractions),
            points,
        });
    }
    cfg.snapshot("curve")?;
    for c in &curves {
        let mut summary = String::from("fraction\tmean_map\tstd_map\n");
        for r in &c.summary {
            let _ = writeln!(summary, "{}\t{}\t{}", r.fraction, r.mean_map, r.std_map);
        }
        write_text(&cfg.output_dir.join(format!("curve-{}.tsv", c.setting)), &summary)?;
        let mut raw = String::from("fraction\tseed\ttrain_size\tmap\n");
        for p in &c.points {
            let _ = writeln!(raw, "{}\t{}\t{}\t{}", p.fraction, p.seed, p.train_size, p.map_score);
        }
        write_text(&cfg.output_dir.join(format!("curve-{}-runs.tsv", c.setting)), &raw)?;
    }
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOutcome {
    pub max_error: f64,
    pub instances: usize,
    pub passed: bool,
}

impl GradcheckOutcome {
    pub fn line(&self) -> String {
        if self.passed {
            format!("max relative error {:.3e} < 1e-4: PASS", self.max_error)
        } else {
            format!("max relative error {:.3e} >= 1e-4: FAIL", self.max_error)
        }
    }
}

/// Finite-difference step used by `gradcheck`.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Runs the gradient checker on `instances` random models and batches.
/// Instances with a ReLU pre-activation within `10 * eps` of zero are
/// redrawn, since central differences are meaningless across the kink.
/// `corrupt` perturbs one analytic gradient to show the check can fail.
pub fn cmd_gradcheck(seed: u64, instances: usize, corrupt: bool) -> Result<GradcheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = [TaskId::Qq, TaskId::Nli, TaskId::Fnc];
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let task = tasks[i % tasks.len()];
        let activation = if i % 4 == 3 { Activation::Tanh } else { Activation::Relu };
        let (model, batch, labels) = loop {
            let config = TrainConfig {
                shared_units: 8,
                task_units: 4,
                activation,
                seed: rng.gen(),
                ..TrainConfig::default()
            };
            let counts = BTreeMap::from([(task, task.class_count())]);
            let mut model = init_model_for(&config, task, &counts)?;
            // Nonzero biases so the check covers their gradients too.
            for layer in [&mut model.shared, &mut model.heads.get_mut(&task).expect("head").hidden] {
                for b in &mut layer.bias {
                    *b = rng.gen_range(-0.5..0.5);
                }
            }
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..14).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let batch = Matrix::from_rows(&rows)?;
            let labels: Vec<Label> = (0..5)
                .map(|_| Label::new(rng.gen_range(0..task.class_count()), task.class_count()))
                .collect::<Result<_>>()?;
            let cache = model.forward(&batch, task, Mode::Eval, &mut rng)?;
            let margin = 10.0 * GRADCHECK_EPS;
            let clear = activation == Activation::Tanh
                || cache.shared_pre.as_slice().iter().chain(cache.task_pre.as_slice()).all(|v| v.abs() >= margin);
            if clear {
                break (model, batch, labels);
            }
        };
        let err = grad_check_with(&model, &batch, &labels, task, GRADCHECK_EPS, |g| {
            if corrupt && i == 0 {
                g[0] += 1e-2 * (1.0 + g[0].abs());
            }
        })?;
        worst = worst.max(err);
    }
    Ok(GradcheckOutcome {
        max_error: worst,
        instances,
        passed: worst < GRADCHECK_TOLERANCE,
    })
}

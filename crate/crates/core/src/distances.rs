//! The five pair metrics and the 14-slot feature vector.
//!
//! Slots 0..12 are metric-major over `[cosine, manhattan, bhattacharya,
//! euclidean] x [embedding, unigram, trigram]`; slot 12 is Jaccard over
//! unigrams and slot 13 Jaccard over trigrams.
//!
//! Cosine and Jaccard follow the printed definitions by default:
//! `x.y / (|x| + |y|)` and `x.y / m`. The textbook forms are available
//! through [`CosineMode::Standard`] and [`JaccardMode::Iou`].

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textrep::{
    indicator_vector, mean_embedding, EmbeddingTable, SparseBinaryVec, Vocab, VocabKind,
};

/// Floor applied to the Bhattacharyya coefficient before taking the log.
pub const BHATTACHARYA_EPS: f64 = 1e-12;

pub const NUM_FEATURES: usize = 14;

fn check_len(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    Ok(())
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `sum(x_i y_i) / (sqrt(sum x_i^2) + sqrt(sum y_i^2))`, 0 when both norms vanish.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    let denom = norm(x) + norm(y);
    Ok(if denom == 0.0 { 0.0 } else { dot(x, y) / denom })
}

/// Product-of-norms cosine similarity, 0 when either norm vanishes.
pub fn cosine_standard(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    let denom = norm(x) * norm(y);
    Ok(if denom == 0.0 { 0.0 } else { dot(x, y) / denom })
}

pub fn manhattan(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum())
}

/// `-ln(max(eps, sum sqrt(max(0, x_i y_i))))`.
pub fn bhattacharya(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    let coefficient: f64 = x.iter().zip(y).map(|(a, b)| (a * b).max(0.0).sqrt()).sum();
    Ok(-coefficient.max(BHATTACHARYA_EPS).ln())
}

pub fn euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    check_len(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

fn check_binary(x: &[f64], y: &[f64]) -> Result<()> {
    check_len(x, y)?;
    if x.is_empty() || x.iter().chain(y).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::NotBinary);
    }
    Ok(())
}

/// `x.y / m` over binary vectors of dimension `m`.
pub fn jaccard(x: &[f64], y: &[f64]) -> Result<f64> {
    check_binary(x, y)?;
    Ok(dot(x, y) / x.len() as f64)
}

/// Intersection over union, 0 when both vectors are empty.
pub fn jaccard_iou(x: &[f64], y: &[f64]) -> Result<f64> {
    check_binary(x, y)?;
    let inter = dot(x, y);
    let union = x.iter().zip(y).filter(|(a, b)| **a == 1.0 || **b == 1.0).count() as f64;
    Ok(if union == 0.0 { 0.0 } else { inter / union })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Dot product over the sum of norms.
    #[default]
    NormSum,
    Standard,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JaccardMode {
    /// Overlap divided by the vector dimension.
    #[default]
    Dims,
    Iou,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrigramKind {
    #[default]
    Char,
    Word,
}

impl TrigramKind {
    pub fn vocab_kind(self) -> VocabKind {
        match self {
            TrigramKind::Char => VocabKind::CharTrigram,
            TrigramKind::Word => VocabKind::WordTrigram,
        }
    }
}

impl CosineMode {
    pub fn apply(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            CosineMode::NormSum => cosine(x, y),
            CosineMode::Standard => cosine_standard(x, y),
        }
    }
}

impl JaccardMode {
    pub fn apply(self, x: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            JaccardMode::Dims => jaccard(x, y),
            JaccardMode::Iou => jaccard_iou(x, y),
        }
    }
}

/// Counts that determine every metric on a pair of binary vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryOverlap {
    pub dims: usize,
    pub x_ones: usize,
    pub y_ones: usize,
    pub shared: usize,
}

impl BinaryOverlap {
    pub fn of(x: &SparseBinaryVec, y: &SparseBinaryVec) -> Result<Self> {
        if x.dims() != y.dims() {
            return Err(Error::LengthMismatch(x.dims(), y.dims()));
        }
        Ok(BinaryOverlap {
            dims: x.dims(),
            x_ones: x.count(),
            y_ones: y.count(),
            shared: x.overlap(y),
        })
    }

    fn differing(&self) -> f64 {
        (self.x_ones + self.y_ones - 2 * self.shared) as f64
    }

    pub fn cosine(&self, mode: CosineMode) -> f64 {
        let (nx, ny) = ((self.x_ones as f64).sqrt(), (self.y_ones as f64).sqrt());
        let denom = match mode {
            CosineMode::NormSum => nx + ny,
            CosineMode::Standard => nx * ny,
        };
        if denom == 0.0 {
            0.0
        } else {
            self.shared as f64 / denom
        }
    }

    pub fn manhattan(&self) -> f64 {
        self.differing()
    }

    pub fn bhattacharya(&self) -> f64 {
        -(self.shared as f64).max(BHATTACHARYA_EPS).ln()
    }

    pub fn euclidean(&self) -> f64 {
        self.differing().sqrt()
    }

    pub fn jaccard(&self, mode: JaccardMode) -> f64 {
        let denom = match mode {
            JaccardMode::Dims => self.dims,
            JaccardMode::Iou => self.x_ones + self.y_ones - self.shared,
        };
        if denom == 0 {
            0.0
        } else {
            self.shared as f64 / denom as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Manhattan,
    Bhattacharya,
    Euclidean,
    Jaccard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    MeanEmbedding,
    Unigram,
    Trigram,
}

impl Metric {
    fn name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Manhattan => "manhattan",
            Metric::Bhattacharya => "bhattacharya",
            Metric::Euclidean => "euclidean",
            Metric::Jaccard => "jaccard",
        }
    }
}

impl Representation {
    fn name(self) -> &'static str {
        match self {
            Representation::MeanEmbedding => "embedding",
            Representation::Unigram => "unigram",
            Representation::Trigram => "trigram",
        }
    }
}

/// The canonical slot layout.
pub const SLOTS: [(Metric, Representation); NUM_FEATURES] = {
    use Metric::*;
    use Representation::*;
    [
        (Cosine, MeanEmbedding),
        (Cosine, Unigram),
        (Cosine, Trigram),
        (Manhattan, MeanEmbedding),
        (Manhattan, Unigram),
        (Manhattan, Trigram),
        (Bhattacharya, MeanEmbedding),
        (Bhattacharya, Unigram),
        (Bhattacharya, Trigram),
        (Euclidean, MeanEmbedding),
        (Euclidean, Unigram),
        (Euclidean, Trigram),
        (Jaccard, Unigram),
        (Jaccard, Trigram),
    ]
};

/// Name of a slot, e.g. `euclidean_trigram`.
pub fn slot_name(slot: usize) -> String {
    let (m, r) = SLOTS[slot];
    format!("{}_{}", m.name(), r.name())
}

/// The feature-group combinations trained in isolation.
pub const FEATURE_GROUPS: [&str; 6] = [
    "unigrams",
    "mean_emb",
    "trigrams",
    "unigrams+trigrams",
    "unigrams+mean_emb",
    "mean_emb+trigrams",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask(pub [bool; NUM_FEATURES]);

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask::all()
    }
}

impl FeatureMask {
    pub fn all() -> Self {
        FeatureMask([true; NUM_FEATURES])
    }

    pub fn none() -> Self {
        FeatureMask([false; NUM_FEATURES])
    }

    pub fn representation(rep: Representation) -> Self {
        let mut mask = FeatureMask::none();
        for (i, &(_, r)) in SLOTS.iter().enumerate() {
            mask.0[i] = r == rep;
        }
        mask
    }

    /// Union of `+`-joined group names (`unigrams`, `trigrams`, `ngrams`,
    /// `mean_emb`, `emb`) or canonical slot names.
    pub fn from_selection(selection: &str) -> Result<Self> {
        let mut mask = FeatureMask::none();
        for part in selection.split('+').map(str::trim) {
            let add = match part {
                "unigrams" | "unigram" => FeatureMask::representation(Representation::Unigram),
                "trigrams" | "trigram" | "ngrams" => {
                    FeatureMask::representation(Representation::Trigram)
                }
                "mean_emb" | "emb" | "embedding" => {
                    FeatureMask::representation(Representation::MeanEmbedding)
                }
                name => {
                    let slot = (0..NUM_FEATURES)
                        .find(|&i| slot_name(i) == name)
                        .ok_or_else(|| Error::UnknownFeature(name.to_string()))?;
                    let mut m = FeatureMask::none();
                    m.0[slot] = true;
                    m
                }
            };
            mask = mask.union(&add);
        }
        Ok(mask)
    }

    pub fn union(&self, other: &FeatureMask) -> Self {
        let mut out = *self;
        for (o, b) in out.0.iter_mut().zip(other.0) {
            *o |= b;
        }
        out
    }

    pub fn without(&self, slot: usize) -> Self {
        let mut out = *self;
        out.0[slot] = false;
        out
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn active_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..NUM_FEATURES).filter(|&i| self.0[i])
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.count() == 0 {
            Err(Error::EmptyMask)
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; NUM_FEATURES],
    pub mask: FeatureMask,
}

impl FeatureVector {
    /// Zeroes out the slots `mask` disables.
    pub fn masked(mut self, mask: FeatureMask) -> Self {
        for (v, on) in self.values.iter_mut().zip(mask.0) {
            if !on {
                *v = 0.0;
            }
        }
        self.mask = mask;
        self
    }

    /// Values of the active slots, in slot order.
    pub fn active_values(&self) -> Vec<f64> {
        self.mask.active_slots().map(|i| self.values[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureOptions {
    #[serde(default)]
    pub mask: FeatureMask,
    #[serde(default)]
    pub cosine: CosineMode,
    #[serde(default)]
    pub jaccard: JaccardMode,
    #[serde(default)]
    pub trigram: TrigramKind,
}

/// The 14 distances between two sets of precomputed representations.
pub fn feature_values(
    emb: (&[f64], &[f64]),
    unigram: (&SparseBinaryVec, &SparseBinaryVec),
    trigram: (&SparseBinaryVec, &SparseBinaryVec),
    options: &FeatureOptions,
) -> Result<FeatureVector> {
    let (ea, eb) = emb;
    let uni = BinaryOverlap::of(unigram.0, unigram.1)?;
    let tri = BinaryOverlap::of(trigram.0, trigram.1)?;
    let cm = options.cosine;
    let values = [
        cm.apply(ea, eb)?,
        uni.cosine(cm),
        tri.cosine(cm),
        manhattan(ea, eb)?,
        uni.manhattan(),
        tri.manhattan(),
        bhattacharya(ea, eb)?,
        uni.bhattacharya(),
        tri.bhattacharya(),
        euclidean(ea, eb)?,
        uni.euclidean(),
        tri.euclidean(),
        uni.jaccard(options.jaccard),
        tri.jaccard(options.jaccard),
    ];
    Ok(FeatureVector {
        values,
        mask: FeatureMask::all(),
    }
    .masked(options.mask))
}

/// Everything that determines how texts become features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerFingerprint {
    pub unigram_vocab: String,
    pub trigram_vocab: String,
    pub embeddings: String,
    pub embedding_dim: usize,
    pub options: FeatureOptions,
}

impl FeaturizerFingerprint {
    /// Human-readable differences; empty when the two agree.
    pub fn differences(&self, other: &FeaturizerFingerprint) -> Vec<String> {
        let mut out = Vec::new();
        let mut cmp = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name}: {a} vs {b}"));
            }
        };
        cmp("unigram vocab", self.unigram_vocab.clone(), other.unigram_vocab.clone());
        cmp("trigram vocab", self.trigram_vocab.clone(), other.trigram_vocab.clone());
        cmp("embeddings", self.embeddings.clone(), other.embeddings.clone());
        cmp("embedding dim", self.embedding_dim.to_string(), other.embedding_dim.to_string());
        cmp("feature mask", self.options.mask.to_string(), other.options.mask.to_string());
        cmp("cosine", format!("{:?}", self.options.cosine), format!("{:?}", other.options.cosine));
        cmp("jaccard", format!("{:?}", self.options.jaccard), format!("{:?}", other.options.jaccard));
        cmp("trigram", format!("{:?}", self.options.trigram), format!("{:?}", other.options.trigram));
        out
    }

    pub fn with_mask(&self, mask: FeatureMask) -> Self {
        let mut out = self.clone();
        out.options.mask = mask;
        out
    }
}

#[derive(Debug, Clone)]
pub struct Featurizer {
    pub unigram: Vocab,
    pub trigram: Vocab,
    pub embeddings: EmbeddingTable,
    pub options: FeatureOptions,
}

impl Featurizer {
    /// Builds both vocabularies from `texts` (both sides of the main-task
    /// training pairs).
    pub fn fit<S: AsRef<str>>(
        texts: &[S],
        embeddings: EmbeddingTable,
        options: FeatureOptions,
    ) -> Result<Self> {
        Ok(Featurizer {
            unigram: crate::textrep::build_vocab(texts, VocabKind::WordUnigram)?,
            trigram: crate::textrep::build_vocab(texts, options.trigram.vocab_kind())?,
            embeddings,
            options,
        })
    }

    pub fn features(&self, text_a: &str, text_b: &str) -> Result<FeatureVector> {
        let ea = mean_embedding(text_a, &self.embeddings);
        let eb = mean_embedding(text_b, &self.embeddings);
        feature_values(
            (ea.as_slice(), eb.as_slice()),
            (&indicator_vector(text_a, &self.unigram), &indicator_vector(text_b, &self.unigram)),
            (&indicator_vector(text_a, &self.trigram), &indicator_vector(text_b, &self.trigram)),
            &self.options,
        )
    }

    /// Featurizes many pairs in parallel, preserving order.
    pub fn features_many(&self, pairs: &[(&str, &str)]) -> Result<Vec<FeatureVector>> {
        pairs.par_iter().map(|(a, b)| self.features(a, b)).collect()
    }

    pub fn fingerprint(&self) -> FeaturizerFingerprint {
        FeaturizerFingerprint {
            unigram_vocab: self.unigram.fingerprint(),
            trigram_vocab: self.trigram.fingerprint(),
            embeddings: self.embeddings.fingerprint().to_string(),
            embedding_dim: self.embeddings.dim(),
            options: self.options,
        }
    }
}

/// Writes one tab-separated line per pair: `pair_id` then the 14 values.
pub fn write_feature_cache<'a, I>(rows: I, writer: impl Write) -> std::io::Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a FeatureVector)>,
{
    let mut w = BufWriter::new(writer);
    for (pair_id, fv) in rows {
        w.write_all(pair_id.as_bytes())?;
        for v in fv.values {
            write!(w, "\t{v}")?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_feature_cache(rows: &[(String, FeatureVector)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_feature_cache(rows.iter().map(|(id, fv)| (id.as_str(), fv)), file)
        .map_err(|e| Error::io(path, e))
}

/// Reads a feature cache; every slot is marked active.
pub fn load_feature_cache(path: impl AsRef<Path>) -> Result<Vec<(String, FeatureVector)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let mut fields = line.split('\t');
        let pair_id = fields.next().unwrap_or_default().to_string();
        let values: Vec<f64> = fields
            .map(|f| f64::from_str(f).map_err(|e| err(format!("`{f}`: {e}"))))
            .collect::<Result<_>>()?;
        let values: [f64; NUM_FEATURES] = values
            .try_into()
            .map_err(|v: Vec<f64>| err(format!("expected {NUM_FEATURES} values, found {}", v.len())))?;
        rows.push((
            pair_id,
            FeatureVector {
                values,
                mask: FeatureMask::all(),
            },
        ));
    }
    Ok(rows)
}

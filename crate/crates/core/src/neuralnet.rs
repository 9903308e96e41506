//! Multi-task feed-forward network: one shared hidden layer, then a hidden
//! layer and a softmax classifier per task. Trained with mini-batch SGD,
//! classic momentum and inverted dropout on the shared layer's output.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Label, TaskId};
use crate::distances::FeatureOptions;
use crate::error::{Error, Result};

/// Lower clamp on probabilities inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `self * other`
    fn matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`
    fn t_matmul(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b_row = other.row(r);
            for (i, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out.row_mut(i).iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`
    fn matmul_t(&self, other: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, other.cols);
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            rows: usize,
            cols: usize,
            values: Vec<&'a [f64]>,
        }
        Repr {
            rows: self.rows,
            cols: self.cols,
            values: (0..self.rows).map(|i| self.row(i)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            rows: usize,
            cols: usize,
            values: Vec<Vec<f64>>,
        }
        let repr = Repr::deserialize(d)?;
        if repr.values.len() != repr.rows || repr.values.iter().any(|r| r.len() != repr.cols) {
            return Err(D::Error::custom(format!(
                "matrix values do not match declared shape {}x{}",
                repr.rows, repr.cols
            )));
        }
        Ok(Matrix {
            rows: repr.rows,
            cols: repr.cols,
            data: repr.values.concat(),
        })
    }
}

/// Affine layer `x * weights + bias`, weights stored `[fan_in x fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Glorot-uniform weights, zero biases.
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Dense::zeros(fan_in, fan_out);
        for w in layer.weights.as_mut_slice() {
            *w = rng.gen_range(-limit..=limit);
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.matmul(&self.weights);
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        out
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.data.iter().chain(&self.bias)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.data.iter_mut().chain(self.bias.iter_mut())
    }

    fn param_count(&self) -> usize {
        self.weights.data.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    100
}
fn default_learning_rate() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_dropout() -> f64 {
    0.02
}
fn default_shared_units() -> usize {
    64
}
fn default_task_units() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_shared_units")]
    pub shared_units: usize,
    #[serde(default = "default_task_units")]
    pub task_units: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub aux_tasks: Vec<TaskId>,
    #[serde(default)]
    pub features: FeatureOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            momentum: default_momentum(),
            dropout: default_dropout(),
            shared_units: default_shared_units(),
            task_units: default_task_units(),
            activation: Activation::default(),
            seed: 0,
            aux_tasks: Vec::new(),
            features: FeatureOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.shared_units == 0 || self.task_units == 0 {
            return bad("hidden layers need at least one unit");
        }
        self.features.mask.ensure_nonempty()
    }
}

/// Task-specific hidden layer plus classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub hidden: Dense,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub input_dim: usize,
    pub main_task: TaskId,
    pub shared: Dense,
    pub heads: BTreeMap<TaskId, Head>,
    pub activation: Activation,
    pub config: TrainConfig,
    pub rng_seed: u64,
}

/// Builds a model with one head per task in `class_counts`. The main task is
/// `TaskId::Qq` when present, otherwise the first non-auxiliary task.
pub fn init_model(config: &TrainConfig, class_counts: &BTreeMap<TaskId, usize>) -> Result<MlpModel> {
    let main_task = if class_counts.contains_key(&TaskId::Qq) {
        TaskId::Qq
    } else {
        *class_counts
            .keys()
            .find(|t| !config.aux_tasks.contains(t))
            .ok_or(Error::MissingClassCount(TaskId::Qq))?
    };
    init_model_for(config, main_task, class_counts)
}

pub fn init_model_for(
    config: &TrainConfig,
    main_task: TaskId,
    class_counts: &BTreeMap<TaskId, usize>,
) -> Result<MlpModel> {
    let input_dim = config.features.mask.count();
    if input_dim == 0 {
        return Err(Error::EmptyMask);
    }
    let mut tasks = vec![main_task];
    tasks.extend(config.aux_tasks.iter().copied().filter(|t| *t != main_task));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shared = Dense::glorot(input_dim, config.shared_units, &mut rng);
    let mut heads = BTreeMap::new();
    for task in tasks {
        let classes = *class_counts.get(&task).ok_or(Error::MissingClassCount(task))?;
        heads.insert(
            task,
            Head {
                hidden: Dense::glorot(config.shared_units, config.task_units, &mut rng),
                output: Dense::glorot(config.task_units, classes, &mut rng),
            },
        );
    }
    Ok(MlpModel {
        input_dim,
        main_task,
        shared,
        heads,
        activation: config.activation,
        config: config.clone(),
        rng_seed: config.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    pub shared_pre: Matrix,
    /// Shared activations after dropout.
    pub shared_out: Matrix,
    /// Per-unit dropout scale (0 or 1/(1-p)); `None` in eval mode.
    pub dropout_scale: Option<Matrix>,
    pub task_pre: Matrix,
    pub task_out: Matrix,
    pub probs: Matrix,
}

fn softmax_rows(logits: &mut Matrix) {
    for i in 0..logits.rows {
        let row = logits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl MlpModel {
    pub fn head(&self, task: TaskId) -> Result<&Head> {
        self.heads.get(&task).ok_or(Error::UnknownTask(task))
    }

    /// Checks that all layers chain together and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        let dim = |msg: String| Err(Error::Dimension(msg));
        if self.shared.fan_in() != self.input_dim {
            return dim(format!("shared layer expects {} inputs, model declares {}", self.shared.fan_in(), self.input_dim));
        }
        if self.input_dim != self.config.features.mask.count() {
            return dim("input_dim disagrees with the feature mask".into());
        }
        if !self.heads.contains_key(&self.main_task) {
            return Err(Error::UnknownTask(self.main_task));
        }
        for (task, head) in &self.heads {
            if head.hidden.fan_in() != self.shared.fan_out() || head.output.fan_in() != head.hidden.fan_out() {
                return dim(format!("head {task} does not chain onto the shared layer"));
            }
            if head.output.fan_out() < 2 {
                return dim(format!("head {task} has fewer than two classes"));
            }
        }
        let layers = std::iter::once(&self.shared)
            .chain(self.heads.values().flat_map(|h| [&h.hidden, &h.output]));
        for layer in layers {
            if layer.bias.len() != layer.fan_out() {
                return dim("bias length differs from layer width".into());
            }
            if layer.params().any(|p| !p.is_finite()) {
                return dim("non-finite parameter".into());
            }
        }
        Ok(())
    }

    pub fn class_count(&self, task: TaskId) -> Result<usize> {
        Ok(self.head(task)?.output.fan_out())
    }

    pub fn forward(&self, batch: &Matrix, task: TaskId, mode: Mode, rng: &mut ChaCha8Rng) -> Result<ForwardCache> {
        self.forward_with_dropout(batch, task, mode, self.config.dropout, rng)
    }

    fn forward_with_dropout(
        &self,
        batch: &Matrix,
        task: TaskId,
        mode: Mode,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardCache> {
        let head = self.head(task)?;
        if batch.cols != self.input_dim {
            return Err(Error::Dimension(format!(
                "batch has {} columns, model expects {}",
                batch.cols, self.input_dim
            )));
        }
        let act = self.activation;
        let shared_pre = self.shared.apply(batch);
        let mut shared_out = shared_pre.clone();
        shared_out.data.iter_mut().for_each(|v| *v = act.apply(*v));

        let dropout_scale = if mode == Mode::Train && dropout > 0.0 {
            let keep = 1.0 / (1.0 - dropout);
            let mut scale = Matrix::zeros(shared_out.rows, shared_out.cols);
            for s in scale.data.iter_mut() {
                *s = if rng.gen::<f64>() < dropout { 0.0 } else { keep };
            }
            for (h, s) in shared_out.data.iter_mut().zip(&scale.data) {
                *h *= s;
            }
            Some(scale)
        } else {
            None
        };

        let task_pre = head.hidden.apply(&shared_out);
        let mut task_out = task_pre.clone();
        task_out.data.iter_mut().for_each(|v| *v = act.apply(*v));
        let mut probs = head.output.apply(&task_out);
        softmax_rows(&mut probs);
        Ok(ForwardCache {
            input: batch.clone(),
            shared_pre,
            shared_out,
            dropout_scale,
            task_pre,
            task_out,
            probs,
        })
    }

    /// Eval-mode class probabilities.
    pub fn predict(&self, batch: &Matrix, task: TaskId) -> Result<Matrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(batch, task, Mode::Eval, &mut rng)?.probs)
    }

    /// Gradients of the mean loss with respect to the shared layer and the
    /// head of `task`.
    pub fn backward(&self, cache: &ForwardCache, labels: &[Label], task: TaskId) -> Result<Gradients> {
        let head = self.head(task)?;
        let n = cache.probs.rows;
        check_labels(labels, n, cache.probs.cols)?;
        let act = self.activation;

        let mut d_logits = cache.probs.clone();
        for (i, label) in labels.iter().enumerate() {
            d_logits.row_mut(i)[label.class_index] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        d_logits.data.iter_mut().for_each(|v| *v *= inv_n);

        let output = Dense {
            weights: cache.task_out.t_matmul(&d_logits),
            bias: d_logits.column_sums(),
        };
        let mut d_task = d_logits.matmul_t(&head.output.weights);
        for (d, z) in d_task.data.iter_mut().zip(&cache.task_pre.data) {
            *d *= act.derivative(*z);
        }
        let hidden = Dense {
            weights: cache.shared_out.t_matmul(&d_task),
            bias: d_task.column_sums(),
        };
        let mut d_shared = d_task.matmul_t(&head.hidden.weights);
        if let Some(scale) = &cache.dropout_scale {
            for (d, s) in d_shared.data.iter_mut().zip(&scale.data) {
                *d *= s;
            }
        }
        for (d, z) in d_shared.data.iter_mut().zip(&cache.shared_pre.data) {
            *d *= act.derivative(*z);
        }
        let shared = Dense {
            weights: cache.input.t_matmul(&d_shared),
            bias: d_shared.column_sums(),
        };
        Ok(Gradients {
            task,
            shared,
            head: Head { hidden, output },
        })
    }

    fn param_count(&self, task: TaskId) -> Result<usize> {
        let head = self.head(task)?;
        Ok(self.shared.param_count() + head.hidden.param_count() + head.output.param_count())
    }

    fn param_mut(&mut self, task: TaskId, idx: usize) -> &mut f64 {
        let head = self.heads.get_mut(&task).expect("task checked by caller");
        self.shared
            .params_mut()
            .chain(head.hidden.params_mut())
            .chain(head.output.params_mut())
            .nth(idx)
            .expect("parameter index in range")
    }
}

fn check_labels(labels: &[Label], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!("{} labels for {} rows", labels.len(), rows)));
    }
    if let Some(bad) = labels.iter().find(|l| l.class_index >= classes) {
        return Err(Error::LabelOutOfRange {
            index: bad.class_index,
            count: classes,
        });
    }
    Ok(())
}

/// Mean negative log-likelihood with probabilities floored at [`PROB_FLOOR`].
pub fn loss(probs: &Matrix, labels: &[Label]) -> Result<f64> {
    check_labels(labels, probs.rows, probs.cols)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, l)| -probs.get(i, l.class_index).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Parameter gradients for one task's path through the network.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub task: TaskId,
    pub shared: Dense,
    pub head: Head,
}

impl Gradients {
    fn values(&self) -> impl Iterator<Item = &f64> {
        self.shared
            .params()
            .chain(self.head.hidden.params())
            .chain(self.head.output.params())
    }

}

/// Momentum buffers, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    shared: Dense,
    heads: BTreeMap<TaskId, Head>,
}

impl Velocity {
    pub fn zeros_like(model: &MlpModel) -> Self {
        let zero = |d: &Dense| Dense::zeros(d.fan_in(), d.fan_out());
        Velocity {
            shared: zero(&model.shared),
            heads: model
                .heads
                .iter()
                .map(|(t, h)| {
                    (
                        *t,
                        Head {
                            hidden: zero(&h.hidden),
                            output: zero(&h.output),
                        },
                    )
                })
                .collect(),
        }
    }
}

fn momentum_update(param: &mut Dense, velocity: &mut Dense, grad: &Dense, momentum: f64, lr: f64) {
    for ((p, v), g) in param.params_mut().zip(velocity.params_mut()).zip(grad.params()) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

/// Applies precomputed gradients: `v <- momentum v - lr g; theta <- theta + v`.
/// Only the shared layer and the head of `grads.task` change.
pub fn apply_gradients(model: &mut MlpModel, velocity: &mut Velocity, grads: &Gradients, momentum: f64, lr: f64) -> Result<()> {
    let task = grads.task;
    let head = model.heads.get_mut(&task).ok_or(Error::UnknownTask(task))?;
    let vhead = velocity.heads.get_mut(&task).ok_or(Error::UnknownTask(task))?;
    momentum_update(&mut model.shared, &mut velocity.shared, &grads.shared, momentum, lr);
    momentum_update(&mut head.hidden, &mut vhead.hidden, &grads.head.hidden, momentum, lr);
    momentum_update(&mut head.output, &mut vhead.output, &grads.head.output, momentum, lr);
    Ok(())
}

/// One SGD-with-momentum step on a batch. Returns the batch loss measured
/// in the (train-mode) forward pass.
pub fn sgd_step(
    model: &mut MlpModel,
    batch: &Matrix,
    labels: &[Label],
    task: TaskId,
    velocity: &mut Velocity,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let cache = model.forward_with_dropout(batch, task, Mode::Train, config.dropout, rng)?;
    let batch_loss = loss(&cache.probs, labels)?;
    let grads = model.backward(&cache, labels, task)?;
    apply_gradients(model, velocity, &grads, config.momentum, config.learning_rate)?;
    Ok(batch_loss)
}

fn eval_loss(model: &MlpModel, batch: &Matrix, labels: &[Label], task: TaskId) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = model.forward_with_dropout(batch, task, Mode::Eval, 0.0, &mut rng)?;
    loss(&cache.probs, labels)
}

/// Largest relative disagreement between backpropagated gradients and
/// central finite differences, over every parameter on `task`'s path.
pub fn grad_check(model: &MlpModel, batch: &Matrix, labels: &[Label], task: TaskId, eps: f64) -> Result<f64> {
    grad_check_with(model, batch, labels, task, eps, |_| {})
}

/// Like [`grad_check`], but lets `tamper` edit the analytic gradients before
/// comparison. Used to confirm the checker catches a wrong gradient.
pub fn grad_check_with(
    model: &MlpModel,
    batch: &Matrix,
    labels: &[Label],
    task: TaskId,
    eps: f64,
    tamper: impl FnOnce(&mut [f64]),
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cache = model.forward_with_dropout(batch, task, Mode::Eval, 0.0, &mut rng)?;
    let mut analytic: Vec<f64> = model.backward(&cache, labels, task)?.values().copied().collect();
    tamper(&mut analytic);

    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (idx, &ga) in analytic.iter().enumerate().take(model.param_count(task)?) {
        let orig = *probe.param_mut(task, idx);
        *probe.param_mut(task, idx) = orig + eps;
        let plus = eval_loss(&probe, batch, labels, task)?;
        *probe.param_mut(task, idx) = orig - eps;
        let minus = eval_loss(&probe, batch, labels, task)?;
        *probe.param_mut(task, idx) = orig;
        let gn = (plus - minus) / (2.0 * eps);
        let rel = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distances::FeatureMask;

    fn counts(pairs: &[(TaskId, usize)]) -> BTreeMap<TaskId, usize> {
        pairs.iter().copied().collect()
    }

    fn small_config(input: usize, shared: usize, task: usize) -> TrainConfig {
        let mut mask = FeatureMask::none();
        for i in 0..input {
            mask.0[i] = true;
        }
        TrainConfig {
            shared_units: shared,
            task_units: task,
            features: FeatureOptions { mask, ..Default::default() },
            ..TrainConfig::default()
        }
    }

    fn random_batch(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        Matrix::from_rows(&data).unwrap()
    }

    fn labels(idx: &[usize], classes: usize) -> Vec<Label> {
        idx.iter().map(|&i| Label::new(i, classes).unwrap()).collect()
    }

    #[test]
    fn init_structure_and_determinism() {
        let mut cfg = TrainConfig::default();
        cfg.aux_tasks = vec![TaskId::Qa];
        let a = init_model(&cfg, &counts(&[(TaskId::Qq, 2), (TaskId::Qa, 2)])).unwrap();
        let b = init_model(&cfg, &counts(&[(TaskId::Qq, 2), (TaskId::Qa, 2)])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.heads.len(), 2);
        assert_eq!(a.input_dim, 14);
        a.validate().unwrap();
        let limit = (6.0f64 / (14.0 + 64.0)).sqrt();
        assert!(a.shared.weights.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(a.shared.bias.iter().all(|b| *b == 0.0));

        cfg.aux_tasks = vec![TaskId::Nli];
        let m = init_model(&cfg, &counts(&[(TaskId::Qq, 2), (TaskId::Nli, 3)])).unwrap();
        assert_eq!(m.class_count(TaskId::Qq).unwrap(), 2);
        assert_eq!(m.class_count(TaskId::Nli).unwrap(), 3);

        assert!(matches!(
            init_model(&cfg, &counts(&[(TaskId::Qq, 2)])),
            Err(Error::MissingClassCount(TaskId::Nli))
        ));
    }

    #[test]
    fn forward_properties() {
        let cfg = TrainConfig::default();
        let mut model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = random_batch(7, 14, &mut rng);
        let probs = model.predict(&batch, TaskId::Qq).unwrap();
        for i in 0..probs.rows() {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        let mut no_dropout = model.clone();
        no_dropout.config.dropout = 0.0;
        let train = no_dropout.forward(&batch, TaskId::Qq, Mode::Train, &mut rng).unwrap();
        assert_eq!(train.probs, no_dropout.predict(&batch, TaskId::Qq).unwrap());

        for layer in std::iter::once(&mut model.shared).chain(model.heads.values_mut().flat_map(|h| [&mut h.hidden, &mut h.output])) {
            layer.params_mut().for_each(|p| *p = 0.0);
        }
        let probs = model.predict(&batch, TaskId::Qq).unwrap();
        assert!(probs.as_slice().iter().all(|p| *p == 0.5));

        assert!(matches!(model.predict(&batch, TaskId::Fnc), Err(Error::UnknownTask(TaskId::Fnc))));
        assert!(matches!(model.predict(&random_batch(2, 3, &mut rng), TaskId::Qq), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_values() {
        let certain = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(loss(&certain, &labels(&[1, 0], 2)).unwrap(), 0.0);
        let uniform = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((loss(&uniform, &labels(&[1, 0], 2)).unwrap() - 2f64.ln()).abs() < 1e-15);
        let wrong = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!((loss(&wrong, &labels(&[1], 2)).unwrap() - 12.0 * 10f64.ln()).abs() < 1e-9);
        let oob = [Label { class_index: 2, class_count: 3 }];
        assert!(matches!(loss(&wrong, &oob), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn zero_step_is_noop() {
        let mut cfg = TrainConfig::default();
        let mut model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
        let before = model.clone();
        cfg.learning_rate = 0.0;
        cfg.momentum = 0.0;
        let mut v = Velocity::zeros_like(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(4, 14, &mut rng);
        sgd_step(&mut model, &batch, &labels(&[0, 1, 1, 0], 2), TaskId::Qq, &mut v, &cfg, &mut rng).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn step_descends() {
        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 1e-4;
        cfg.momentum = 0.0;
        cfg.dropout = 0.0;
        let mut model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_batch(1, 14, &mut rng);
        let y = labels(&[1], 2);
        let before = loss(&model.predict(&x, TaskId::Qq).unwrap(), &y).unwrap();
        let mut v = Velocity::zeros_like(&model);
        sgd_step(&mut model, &x, &y, TaskId::Qq, &mut v, &cfg, &mut rng).unwrap();
        let after = loss(&model.predict(&x, TaskId::Qq).unwrap(), &y).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn step_touches_only_addressed_head() {
        let mut cfg = TrainConfig::default();
        cfg.aux_tasks = vec![TaskId::Qa, TaskId::Fnc];
        let mut model = init_model(&cfg, &counts(&[(TaskId::Qq, 2), (TaskId::Qa, 2), (TaskId::Fnc, 4)])).unwrap();
        let before = model.clone();
        let mut v = Velocity::zeros_like(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_batch(6, 14, &mut rng);
        sgd_step(&mut model, &x, &labels(&[0, 1, 2, 3, 0, 1], 4), TaskId::Fnc, &mut v, &cfg, &mut rng).unwrap();
        assert_eq!(model.heads[&TaskId::Qq], before.heads[&TaskId::Qq]);
        assert_eq!(model.heads[&TaskId::Qa], before.heads[&TaskId::Qa]);
        assert_ne!(model.heads[&TaskId::Fnc], before.heads[&TaskId::Fnc]);
        assert_ne!(model.shared, before.shared);
    }

    #[test]
    fn steps_are_deterministic() {
        let run = || {
            let cfg = TrainConfig::default();
            let mut model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
            let mut v = Velocity::zeros_like(&model);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut trajectory = Vec::new();
            for _ in 0..5 {
                let x = random_batch(8, 14, &mut rng);
                sgd_step(&mut model, &x, &labels(&[0, 1, 0, 1, 1, 1, 0, 0], 2), TaskId::Qq, &mut v, &cfg, &mut rng).unwrap();
                trajectory.push(model.clone());
            }
            trajectory
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_check_random_model() {
        let cfg = small_config(14, 8, 4);
        let model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_batch(5, 14, &mut rng);
        let err = grad_check(&model, &x, &labels(&[0, 1, 1, 0, 1], 2), TaskId::Qq, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_check_zero_model_biases() {
        let cfg = small_config(14, 8, 4);
        let mut model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
        for layer in std::iter::once(&mut model.shared).chain(model.heads.values_mut().flat_map(|h| [&mut h.hidden, &mut h.output])) {
            layer.params_mut().for_each(|p| *p = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_batch(5, 14, &mut rng);
        let y = labels(&[0, 1, 1, 1, 1], 2);
        assert!(grad_check(&model, &x, &y, TaskId::Qq, 1e-5).unwrap() < 1e-6);
        let cache = model.forward(&x, TaskId::Qq, Mode::Eval, &mut rng).unwrap();
        let g = model.backward(&cache, &y, TaskId::Qq).unwrap();
        // (0.5 - 0.2, 0.5 - 0.8)
        assert!((g.head.output.bias[0] - 0.3).abs() < 1e-12);
        assert!((g.head.output.bias[1] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn gradient_check_detects_tampering() {
        let cfg = small_config(14, 8, 4);
        let model = init_model(&cfg, &counts(&[(TaskId::Qq, 2)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random_batch(5, 14, &mut rng);
        let y = labels(&[0, 1, 1, 0, 1], 2);
        let err = grad_check_with(&model, &x, &y, TaskId::Qq, 1e-5, |g| {
            let last = g.len() - 1;
            g[last] += 0.1;
        })
        .unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn tanh_gradients() {
        let mut cfg = small_config(6, 5, 3);
        cfg.activation = Activation::Tanh;
        cfg.aux_tasks = vec![TaskId::Nli];
        let model = init_model(&cfg, &counts(&[(TaskId::Qq, 2), (TaskId::Nli, 3)])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_batch(4, 6, &mut rng);
        let err = grad_check(&model, &x, &labels(&[0, 2, 1, 2], 3), TaskId::Nli, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.features.mask = FeatureMask::none();
        assert!(matches!(c.validate(), Err(Error::EmptyMask)));
    }
}

//! Toy models, synthetic datasets, forward passes and task losses.
//!
//! Two model families ship with the crate:
//!
//! * a 16→32→32→8 regression MLP (tanh, tanh, identity) whose targets are its
//!   own outputs on anisotropic Gaussian inputs plus small noise;
//! * a next-symbol model over a 16-symbol alphabet with two blocks of
//!   (in-proj, out-proj) matrices, 32→48→32→48→16. The input row for a
//!   position is `onehot(s_{t−2}) ⊕ onehot(s_{t−1})` and sequences are
//!   sampled from the model's own softmax.
//!
//! Both use a fixed teacher seed, so "the" teacher of a kind is a constant;
//! the dataset seed only drives inputs, noise and sampling.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::pack::LayerFactors;
use crate::rank::{IntegerAllocation, RankAllocation, SmoothTruncation};
use crate::rng::{gaussian_matrix, orthonormal_columns, seeded, with_singular_values, SeededRng};
use crate::svd::eckart_young;

/// Seed of the canonical teacher weights of every kind.
pub const TEACHER_SEED: u64 = 0x5EED_7EAC;

/// Rows (tokens) per sample in generated datasets.
pub const SAMPLE_ROWS: usize = 64;

pub const ALPHABET: usize = 16;

const REGRESSION_NOISE: f64 = 0.05;
const HELD_OUT_SALT: u64 = 0x0DD5_EED5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, a: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Identity => a.clone(),
            Activation::Relu => a.map(|v| v.max(0.0)),
            Activation::Tanh => a.map(f64::tanh),
        }
    }

    /// Multiplies `g` by the derivative, given pre-activation `a` and output `y`.
    pub(crate) fn backward(self, g: &DenseMatrix, a: &DenseMatrix, y: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Identity => g.clone(),
            Activation::Relu => DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                if a[(r, c)] > 0.0 {
                    g[(r, c)]
                } else {
                    0.0
                }
            }),
            Activation::Tanh => DenseMatrix::from_fn(g.rows(), g.cols(), |r, c| {
                let t = y[(r, c)];
                g[(r, c)] * (1.0 - t * t)
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    /// `m x n`: maps `m` input features to `n` outputs as `h W`.
    pub weight: DenseMatrix,
    pub activation: Activation,
    pub compressible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherStudentRegression,
    CharLm,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::TeacherStudentRegression => "teacher_student_regression",
            TaskKind::CharLm => "char_lm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    layers: Vec<LayerSpec>,
}

impl ToyModel {
    /// Checks unique names and chained dimensions.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a model needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|p| p.name == l.name) {
                return Err(Error::InvalidArgument(format!("duplicate layer name `{}`", l.name)));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::shape(
                    "ToyModel::new",
                    format!(
                        "`{}` outputs {} features but `{}` expects {}",
                        layers[i - 1].name,
                        layers[i - 1].weight.cols(),
                        l.name,
                        l.weight.rows()
                    ),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn set_weight(&mut self, idx: usize, weight: DenseMatrix) -> Result<()> {
        let layer = &mut self.layers[idx];
        if layer.weight.shape() != weight.shape() {
            return Err(Error::shape(
                "ToyModel::set_weight",
                format!("`{}` is {:?}, replacement is {:?}", layer.name, layer.weight.shape(), weight.shape()),
            ));
        }
        layer.weight = weight;
        Ok(())
    }

    /// `(name, m, n)` of every compressible layer, in order.
    pub fn compressible_shapes(&self) -> Vec<(String, usize, usize)> {
        self.layers
            .iter()
            .filter(|l| l.compressible)
            .map(|l| (l.name.clone(), l.weight.rows(), l.weight.cols()))
            .collect()
    }

    /// Allocation with the same continuous `k` rule applied to every
    /// compressible layer.
    pub fn rank_allocation(&self, k_of: impl Fn(usize, usize) -> f64) -> RankAllocation {
        RankAllocation {
            entries: self
                .compressible_shapes()
                .into_iter()
                .map(|(layer, m, n)| crate::rank::LayerRank { k: k_of(m, n), layer, m, n })
                .collect(),
        }
    }

    /// Canonical teacher of a kind.
    pub fn teacher(kind: TaskKind) -> Self {
        Self::random(kind, TEACHER_SEED)
    }

    /// Model of the given family with weights drawn from `seed`.
    ///
    /// Weights are `U diag(σ) Vᵀ` with orthonormal random factors and
    /// geometrically decaying spectra whose decay differs per layer, rounded
    /// to f32.
    pub fn random(kind: TaskKind, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut layer = |name: &str, m: usize, n: usize, top: f64, decay: f64, act: Activation| {
            let q = m.min(n);
            let s: Vec<f64> = (0..q).map(|i| top * decay.powi(i as i32)).collect();
            LayerSpec {
                name: name.to_string(),
                weight: with_singular_values(&mut rng, m, n, &s).round_to_f32(),
                activation: act,
                compressible: true,
            }
        };
        let layers = match kind {
            TaskKind::TeacherStudentRegression => vec![
                layer("mlp.0", 16, 32, 2.0, 0.80, Activation::Tanh),
                layer("mlp.1", 32, 32, 2.5, 0.90, Activation::Tanh),
                layer("mlp.2", 32, 8, 3.0, 0.75, Activation::Identity),
            ],
            TaskKind::CharLm => vec![
                layer("block0.in_proj", 32, 48, 4.0, 0.92, Activation::Tanh),
                layer("block0.out_proj", 48, 32, 3.0, 0.85, Activation::Tanh),
                layer("block1.in_proj", 32, 48, 3.0, 0.88, Activation::Tanh),
                layer("block1.out_proj", 48, 16, 6.0, 0.80, Activation::Identity),
            ],
        };
        Self::new(layers).expect("built-in layer chain is consistent")
    }

    /// Dense forward pass.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward_prefix(x, self.layers.len())
    }

    /// Output of the first `upto` layers.
    pub fn forward_prefix(&self, x: &DenseMatrix, upto: usize) -> Result<DenseMatrix> {
        let mut h = x.clone();
        for l in &self.layers[..upto] {
            h = l.activation.apply(&h.matmul(&l.weight)?);
        }
        Ok(h)
    }

    /// Dense forward pass recording every layer's pre-activation and output.
    pub fn forward_with_activations(&self, x: &DenseMatrix) -> Result<ForwardTrace> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let a = h.matmul(&l.weight)?;
            h = l.activation.apply(&a);
            pre.push(a);
            outputs.push(h.clone());
        }
        Ok(ForwardTrace { pre_activations: pre, outputs })
    }

    /// Forward pass under one of the compression modes.
    pub fn forward_mode(&self, x: &DenseMatrix, mode: &ForwardMode<'_>) -> Result<DenseMatrix> {
        if let ForwardMode::Factored(factors) = mode {
            if factors.len() != self.layers.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} factor slots for {} layers",
                    factors.len(),
                    self.layers.len()
                )));
            }
        }
        let mut h = x.clone();
        for (idx, l) in self.layers.iter().enumerate() {
            let a = match mode {
                ForwardMode::Dense => h.matmul(&l.weight)?,
                ForwardMode::SmoothTruncated { alloc, beta } => {
                    let a = h.matmul(&l.weight)?;
                    if l.compressible {
                        let entry = alloc.get(&l.name).ok_or_else(|| missing(&l.name))?;
                        let t = SmoothTruncation::new(entry.k, *beta)?;
                        crate::rank::truncate_activation(&a, &t).map_err(|e| e.in_layer(&l.name))?
                    } else {
                        a
                    }
                }
                ForwardMode::HardTruncated(alloc) => {
                    let a = h.matmul(&l.weight)?;
                    if l.compressible {
                        let entry = alloc.get(&l.name).ok_or_else(|| missing(&l.name))?;
                        eckart_young(&a, entry.k).map_err(|e| e.in_layer(&l.name))?
                    } else {
                        a
                    }
                }
                ForwardMode::Factored(factors) => match &factors[idx] {
                    Some(f) => h.matmul(&f.w1)?.matmul(&f.w2)?,
                    None if l.compressible => return Err(missing(&l.name)),
                    None => h.matmul(&l.weight)?,
                },
            };
            h = l.activation.apply(&a);
        }
        Ok(h)
    }

    /// Copy with every compressible weight replaced by its best rank-`k`
    /// approximation.
    pub fn weight_truncated(&self, alloc: &IntegerAllocation) -> Result<Self> {
        let mut out = self.clone();
        for (idx, l) in self.layers.iter().enumerate() {
            if l.compressible {
                let entry = alloc.get(&l.name).ok_or_else(|| missing(&l.name))?;
                out.layers[idx].weight = eckart_young(&l.weight, entry.k)?;
            }
        }
        Ok(out)
    }
}

fn missing(layer: &str) -> Error {
    Error::InvalidArgument(format!("no compression artifact for layer `{layer}`"))
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub pre_activations: Vec<DenseMatrix>,
    pub outputs: Vec<DenseMatrix>,
}

/// How compressible layers are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum ForwardMode<'a> {
    Dense,
    /// Per-sample smooth spectral truncation of every activation.
    SmoothTruncated { alloc: &'a RankAllocation, beta: f64 },
    /// Per-sample best rank-`k` approximation of every activation.
    HardTruncated(&'a IntegerAllocation),
    /// `(h w1) w2` with one factor pair per layer; `None` only for
    /// non-compressible layers.
    Factored(&'a [Option<LayerFactors>]),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Target {
    Regression(DenseMatrix),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: DenseMatrix,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: TaskKind,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// `count` samples of `kind` from `seed`, labelled by the canonical
    /// teacher.
    pub fn generate(kind: TaskKind, seed: u64, count: usize) -> Self {
        let teacher = ToyModel::teacher(kind);
        let mut rng = seeded(seed);
        let samples = match kind {
            TaskKind::TeacherStudentRegression => {
                let dim = teacher.input_dim();
                // Fixed anisotropic input covariance: scales 0.85^j along a
                // fixed random rotation.
                let rotation = orthonormal_columns(&mut seeded(TEACHER_SEED ^ 1), dim, dim);
                let scales: Vec<f64> = (0..dim).map(|j| 1.5 * 0.85f64.powi(j as i32)).collect();
                (0..count)
                    .map(|_| {
                        let z = gaussian_matrix(&mut rng, SAMPLE_ROWS, dim);
                        let x = z.scale_columns(&scales).matmul_t(&rotation).round_to_f32();
                        let clean = teacher.forward(&x).expect("teacher chain matches its inputs");
                        let noise = gaussian_matrix(&mut rng, clean.rows(), clean.cols());
                        let y = DenseMatrix::from_fn(clean.rows(), clean.cols(), |r, c| {
                            clean[(r, c)] + REGRESSION_NOISE * noise[(r, c)]
                        });
                        Sample { input: x, target: Target::Regression(y) }
                    })
                    .collect()
            }
            TaskKind::CharLm => (0..count).map(|_| sample_sequence(&teacher, &mut rng)).collect(),
        };
        Self { kind, seed, samples }
    }

    /// Held-out samples drawn from a seed derived from `seed`.
    pub fn held_out(kind: TaskKind, seed: u64, count: usize) -> Self {
        Self::generate(kind, seed ^ HELD_OUT_SALT, count)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, count: usize) -> Self {
        Self {
            kind: self.kind,
            seed: self.seed,
            samples: self.samples[..count.min(self.samples.len())].to_vec(),
        }
    }

    /// Checks every sample against a model's input and output widths.
    pub fn check_against(&self, model: &ToyModel) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.input.cols() != model.input_dim() {
                return Err(Error::shape(
                    "Dataset::check_against",
                    format!("sample {i} has {} features, model expects {}", s.input.cols(), model.input_dim()),
                ));
            }
            let ok = match (&s.target, self.kind) {
                (Target::Regression(y), TaskKind::TeacherStudentRegression) => {
                    y.shape() == (s.input.rows(), model.output_dim())
                }
                (Target::Tokens(t), TaskKind::CharLm) => {
                    t.len() == s.input.rows() && t.iter().all(|&tok| tok < model.output_dim())
                }
                _ => false,
            };
            if !ok {
                return Err(Error::shape("Dataset::check_against", format!("sample {i} target does not fit the model")));
            }
        }
        Ok(())
    }
}

fn context_row(prev2: usize, prev1: usize) -> Vec<f64> {
    let mut row = vec![0.0; 2 * ALPHABET];
    row[prev2] = 1.0;
    row[ALPHABET + prev1] = 1.0;
    row
}

fn sample_sequence(teacher: &ToyModel, rng: &mut SeededRng) -> Sample {
    let mut tokens: Vec<usize> = vec![rng.random_range(0..ALPHABET), rng.random_range(0..ALPHABET)];
    let mut rows = Vec::with_capacity(SAMPLE_ROWS);
    for _ in 0..SAMPLE_ROWS {
        let row = context_row(tokens[tokens.len() - 2], tokens[tokens.len() - 1]);
        let x = DenseMatrix::from_rows(std::slice::from_ref(&row)).expect("one finite row");
        let logits = teacher.forward(&x).expect("teacher chain matches its inputs");
        let probs = softmax(logits.row(0));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = ALPHABET - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }
        tokens.push(next);
        rows.push(row);
    }
    Sample {
        input: DenseMatrix::from_rows(&rows).expect("rows share a width"),
        target: Target::Tokens(tokens[2..].to_vec()),
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[idx] - lse
}

/// Mean squared error over all entries, or mean next-symbol cross-entropy.
pub fn task_loss(output: &DenseMatrix, target: &Target) -> Result<f64> {
    match target {
        Target::Regression(y) => {
            if y.shape() != output.shape() {
                return Err(Error::shape("task_loss", format!("{:?} against {:?}", output.shape(), y.shape())));
            }
            let count = (y.rows() * y.cols()).max(1) as f64;
            Ok(output.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / count)
        }
        Target::Tokens(t) => {
            check_tokens(output, t)?;
            let total: f64 = t.iter().enumerate().map(|(r, &tok)| -log_softmax_at(output.row(r), tok)).sum();
            Ok(total / t.len().max(1) as f64)
        }
    }
}

fn check_tokens(output: &DenseMatrix, t: &[usize]) -> Result<()> {
    if t.len() != output.rows() || t.iter().any(|&tok| tok >= output.cols()) {
        return Err(Error::shape(
            "task_loss",
            format!("{} tokens against {}x{} logits", t.len(), output.rows(), output.cols()),
        ));
    }
    Ok(())
}

/// [`task_loss`] and its gradient with respect to `output`.
pub fn task_loss_with_grad(output: &DenseMatrix, target: &Target) -> Result<(f64, DenseMatrix)> {
    let loss = task_loss(output, target)?;
    let grad = match target {
        Target::Regression(y) => {
            let count = (y.rows() * y.cols()).max(1) as f64;
            DenseMatrix::from_fn(y.rows(), y.cols(), |r, c| 2.0 * (output[(r, c)] - y[(r, c)]) / count)
        }
        Target::Tokens(t) => {
            let rows = t.len().max(1) as f64;
            let mut g = DenseMatrix::zeros(output.rows(), output.cols());
            for (r, &tok) in t.iter().enumerate() {
                let p = softmax(output.row(r));
                let row = g.row_mut(r);
                for (c, pc) in p.into_iter().enumerate() {
                    row[c] = (pc - (c == tok) as u8 as f64) / rows;
                }
            }
            g
        }
    };
    Ok((loss, grad))
}

pub fn perplexity(cross_entropy: f64) -> f64 {
    cross_entropy.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub loss: f64,
    /// `exp(loss)` for next-symbol tasks.
    pub perplexity: Option<f64>,
    pub samples: usize,
}

/// Mean task loss over the dataset under `mode`.
pub fn evaluate(model: &ToyModel, dataset: &Dataset, mode: &ForwardMode<'_>) -> Result<EvalReport> {
    let losses: Vec<f64> = dataset
        .samples
        .par_iter()
        .map(|s| task_loss(&model.forward_mode(&s.input, mode)?, &s.target))
        .collect::<Result<_>>()?;
    let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    if !loss.is_finite() {
        return Err(Error::Numerical("evaluation produced a non-finite loss".into()));
    }
    Ok(EvalReport {
        loss,
        perplexity: (dataset.kind == TaskKind::CharLm).then(|| perplexity(loss)),
        samples: losses.len(),
    })
}

/// One probe of the truncation comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationProbe {
    /// Truncated layer, or `None` when every compressible layer is truncated.
    pub layer: Option<String>,
    pub k: Vec<usize>,
    pub activation_loss: f64,
    pub weight_loss: f64,
}

impl TruncationProbe {
    pub fn activation_wins(&self) -> bool {
        self.activation_loss <= self.weight_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruncationReport {
    pub dense_loss: f64,
    pub full: TruncationProbe,
    pub sweep: Vec<TruncationProbe>,
}

/// Task loss with per-sample activation truncation against truncating the
/// weights themselves, at the same rank per layer.
pub fn compare_truncation_modes(
    model: &ToyModel,
    dataset: &Dataset,
    alloc: &IntegerAllocation,
) -> Result<TruncationProbe> {
    let activation = evaluate(model, dataset, &ForwardMode::HardTruncated(alloc))?.loss;
    let weight_model = model.weight_truncated(alloc)?;
    let weight = evaluate(&weight_model, dataset, &ForwardMode::Dense)?.loss;
    Ok(TruncationProbe {
        layer: None,
        k: alloc.entries.iter().map(|e| e.k).collect(),
        activation_loss: activation,
        weight_loss: weight,
    })
}

/// Full comparison at `alloc` plus a sweep truncating one layer at a time to
/// each of `fractions` of its maximal rank.
pub fn truncation_report(
    model: &ToyModel,
    dataset: &Dataset,
    alloc: &IntegerAllocation,
    fractions: &[f64],
) -> Result<TruncationReport> {
    let dense_loss = evaluate(model, dataset, &ForwardMode::Dense)?.loss;
    let full = compare_truncation_modes(model, dataset, alloc)?;
    let shapes = model.compressible_shapes();
    let mut sweep = Vec::new();
    for (probe_layer, _, _) in &shapes {
        for &fraction in fractions {
            let entries = shapes
                .iter()
                .map(|(layer, m, n)| crate::rank::LayerRankInt {
                    layer: layer.clone(),
                    m: *m,
                    n: *n,
                    k: if layer == probe_layer {
                        ((fraction * (*m).min(*n) as f64).round() as usize).min((*m).min(*n))
                    } else {
                        (*m).min(*n)
                    },
                })
                .collect();
            let single = IntegerAllocation { entries };
            let mut probe = compare_truncation_modes(model, dataset, &single)?;
            probe.layer = Some(probe_layer.clone());
            sweep.push(probe);
        }
    }
    Ok(TruncationReport { dense_loss, full, sweep })
}

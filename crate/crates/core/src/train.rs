//! Learning per-layer truncation positions with frozen weights.
//!
//! Every compressible layer's pre-activation `A = h W` is replaced by its
//! smooth truncation `Ã` during training. The only trainable parameters are
//! the continuous `k` of each compressible layer, so there are exactly as
//! many of them as compressible matrices. The objective is
//! `task_loss + γ·|R_now − R_tar|`, minimized with Adam under a cosine
//! learning-rate schedule. `k` is projected back onto `[0, min(m, n)]`
//! after every step.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::BackwardConfig;
use crate::error::{Error, Result};
use crate::model::{task_loss, task_loss_with_grad, Dataset, Sample, ToyModel};
use crate::rank::{
    multi_objective_loss, penalty_gradient, truncate_activation_taped, CompressionTarget, LossBreakdown,
    RankAllocation, RatioCounting, SmoothTruncation,
};
use crate::rng::seeded;

/// Starting point of the learned ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankInit {
    /// `k = min(m, n)` everywhere.
    #[default]
    Full,
    /// The same remapped fraction in every layer, chosen to hit the target.
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to zero along a half cosine over all steps.
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub counting: RatioCounting,
    pub init: RankInit,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
    pub backward: BackwardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            epochs: 200,
            batch_size: 32,
            lr: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            counting: RatioCounting::Remapped,
            init: RankInit::Full,
            seed: 0,
            backward: BackwardConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam decay rates must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        self.backward.validate()
    }
}

/// Learning rate at `step` of `total` for a half-cosine decay from `peak`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Plain Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, beta1, beta2, eps }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Training objective over a fixed set of samples, with its gradient in `k`.
pub struct RankObjective<'a> {
    model: &'a ToyModel,
    /// Allocation entry of every model layer, `None` for dense layers.
    slots: Vec<Option<usize>>,
    pub beta: f64,
    pub target: CompressionTarget,
    pub counting: RatioCounting,
    pub backward: BackwardConfig,
}

impl<'a> RankObjective<'a> {
    /// Checks that `alloc` names every compressible layer once with its shape.
    pub fn new(
        model: &'a ToyModel,
        alloc: &RankAllocation,
        target: CompressionTarget,
        beta: f64,
        counting: RatioCounting,
        backward: BackwardConfig,
    ) -> Result<Self> {
        let mut slots = Vec::with_capacity(model.layers().len());
        let mut used = vec![false; alloc.entries.len()];
        for l in model.layers() {
            if !l.compressible {
                slots.push(None);
                continue;
            }
            let idx = alloc
                .entries
                .iter()
                .position(|e| e.layer == l.name)
                .ok_or_else(|| Error::InvalidArgument(format!("allocation has no entry for `{}`", l.name)))?;
            let e = &alloc.entries[idx];
            if (e.m, e.n) != l.weight.shape() {
                return Err(Error::shape(
                    "RankObjective::new",
                    format!("`{}` is {:?} but the allocation says ({}, {})", l.name, l.weight.shape(), e.m, e.n),
                ));
            }
            used[idx] = true;
            slots.push(Some(idx));
        }
        if let Some(extra) = used.iter().position(|u| !u) {
            return Err(Error::InvalidArgument(format!(
                "allocation entry `{}` matches no compressible layer",
                alloc.entries[extra].layer
            )));
        }
        Ok(Self { model, slots, beta, target, counting, backward })
    }

    /// Task loss of one sample and its gradient in every allocation entry.
    pub fn sample_gradient(&self, alloc: &RankAllocation, sample: &Sample) -> Result<(f64, Vec<f64>)> {
        let layers = self.model.layers();
        let mut tapes = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut outs = Vec::with_capacity(layers.len());
        let mut h = sample.input.clone();
        for (l, slot) in layers.iter().zip(&self.slots) {
            let a = h.matmul(&l.weight)?;
            let a = match slot {
                Some(idx) => {
                    let t = SmoothTruncation::new(alloc.entries[*idx].k, self.beta)?;
                    let (out, tape) = truncate_activation_taped(&a, &t).map_err(|e| e.in_layer(&l.name))?;
                    tapes.push(Some(tape));
                    out
                }
                None => {
                    tapes.push(None);
                    a
                }
            };
            h = l.activation.apply(&a);
            pre.push(a);
            outs.push(h.clone());
        }
        let (loss, mut g) = task_loss_with_grad(&h, &sample.target)?;
        let mut grad = vec![0.0; alloc.entries.len()];
        for idx in (0..layers.len()).rev() {
            let l = &layers[idx];
            let mut g_a = l.activation.backward(&g, &pre[idx], &outs[idx]);
            if let (Some(tape), Some(slot)) = (&tapes[idx], self.slots[idx]) {
                let (g_raw, g_k) = tape.backward(&g_a, &self.backward).map_err(|e| e.in_layer(&l.name))?;
                grad[slot] = g_k;
                g_a = g_raw;
            }
            if idx > 0 {
                g = g_a.matmul_t(&l.weight);
            }
        }
        Ok((loss, grad))
    }

    /// Mean task loss over `samples` and the full objective's gradient.
    pub fn loss_and_gradient(&self, alloc: &RankAllocation, samples: &[&Sample]) -> Result<(LossBreakdown, Vec<f64>)> {
        let parts: Vec<(f64, Vec<f64>)> = samples
            .par_iter()
            .map(|s| self.sample_gradient(alloc, s))
            .collect::<Result<_>>()?;
        let scale = 1.0 / samples.len().max(1) as f64;
        let mut task = 0.0;
        let mut grad = vec![0.0; alloc.entries.len()];
        for (loss, g) in &parts {
            task += loss * scale;
            for (acc, v) in grad.iter_mut().zip(g) {
                *acc += v * scale;
            }
        }
        let pen = penalty_gradient(alloc, &self.target, self.counting);
        for (acc, p) in grad.iter_mut().zip(pen) {
            *acc += p;
        }
        Ok((multi_objective_loss(task, alloc, &self.target, self.counting), grad))
    }

    /// Forward-only version of [`Self::loss_and_gradient`].
    pub fn loss(&self, alloc: &RankAllocation, samples: &[&Sample]) -> Result<LossBreakdown> {
        let losses: Vec<f64> = samples
            .par_iter()
            .map(|s| -> Result<f64> {
                let mut h = s.input.clone();
                for (l, slot) in self.model.layers().iter().zip(&self.slots) {
                    let mut a = h.matmul(&l.weight)?;
                    if let Some(idx) = slot {
                        let t = SmoothTruncation::new(alloc.entries[*idx].k, self.beta)?;
                        a = crate::rank::truncate_activation(&a, &t)?;
                    }
                    h = l.activation.apply(&a);
                }
                task_loss(&h, &s.target)
            })
            .collect::<Result<_>>()?;
        let task = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        Ok(multi_objective_loss(task, alloc, &self.target, self.counting))
    }
}

/// Epoch means of the objective, evaluated before each step, and the ranks
/// at the end of the epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub penalty: f64,
    pub total: f64,
    /// `R_now` after the epoch's last step.
    pub ratio: f64,
    pub ks: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub allocation: RankAllocation,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn final_ratio(&self, counting: RatioCounting) -> f64 {
        crate::rank::model_ratio(&self.allocation, counting)
    }

    /// One `epoch,layer,k,task_loss,ratio` row per epoch and layer.
    pub fn write_trajectory_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "layer", "k", "task_loss", "ratio"])?;
        for rec in &self.history {
            for (e, k) in self.allocation.entries.iter().zip(&rec.ks) {
                w.write_record([
                    rec.epoch.to_string(),
                    e.layer.clone(),
                    k.to_string(),
                    rec.task_loss.to_string(),
                    rec.ratio.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Centered moving average of the epoch totals over `window` epochs
    /// (shrunk at the ends).
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let totals: Vec<f64> = self.history.iter().map(|r| r.total).collect();
        let half = window / 2;
        (0..totals.len())
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(totals.len());
                totals[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }
}

/// Initial allocation of `model` under `init`.
pub fn initial_allocation(model: &ToyModel, init: RankInit, target: &CompressionTarget) -> RankAllocation {
    match init {
        RankInit::Full => model.rank_allocation(|m, n| m.min(n) as f64),
        // Under remapped counting a fraction f of every layer's rank is ratio f.
        RankInit::Target => model.rank_allocation(|m, n| target.r_target * m.min(n) as f64),
    }
}

/// Learns continuous ranks for every compressible layer of `model`.
///
/// The weights stay frozen. Samples are shuffled once per epoch with a
/// generator derived from `cfg.seed`, so a fixed seed reproduces the
/// trajectory bit for bit. A non-finite loss or gradient aborts with
/// [`Error::Diverged`] carrying the allocation from before the bad step.
pub fn train_ranks(
    model: &ToyModel,
    dataset: &Dataset,
    target: &CompressionTarget,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.check_against(model)?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let mut alloc = initial_allocation(model, cfg.init, target);
    let objective = RankObjective::new(model, &alloc, *target, cfg.beta, cfg.counting, cfg.backward)?;
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut adam = Adam::new(alloc.entries.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut task, mut penalty, mut total) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let diverged = |detail: String, alloc: &RankAllocation| Error::Diverged {
                epoch,
                detail,
                last_good: Box::new(alloc.clone()),
            };
            let (loss, grad) = match objective.loss_and_gradient(&alloc, &batch) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Err(diverged(e.to_string(), &alloc)),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(diverged(format!("non-finite loss {} at step {step}", loss.total), &alloc));
            }
            let weight = batch.len() as f64 / dataset.len() as f64;
            task += loss.task_loss * weight;
            penalty += loss.penalty * weight;
            total += loss.total * weight;
            let mut ks = alloc.ks();
            adam.step(&mut ks, &grad, cosine_lr(cfg.lr, step, total_steps));
            alloc.set_ks(&ks);
            alloc.project();
            step += 1;
        }
        log::debug!("epoch {epoch}: task {task:.6} penalty {penalty:.6}");
        history.push(EpochRecord {
            epoch,
            task_loss: task,
            penalty,
            total,
            ratio: crate::rank::model_ratio(&alloc, cfg.counting),
            ks: alloc.ks(),
        });
    }
    Ok(TrainOutcome { allocation: alloc, history })
}

/// Mean task loss of `model` under smooth truncation with `alloc`.
pub fn smooth_task_loss(model: &ToyModel, dataset: &Dataset, alloc: &RankAllocation, beta: f64) -> Result<f64> {
    let target = CompressionTarget::new(1.0, CompressionTarget::DEFAULT_PENALTY_WEIGHT)?;
    let objective = RankObjective::new(model, alloc, target, beta, RatioCounting::Remapped, BackwardConfig::default())?;
    let samples: Vec<&Sample> = dataset.samples.iter().collect();
    Ok(objective.loss(alloc, &samples)?.task_loss)
}

#[cfg(test)]
fn perturbed(alloc: &RankAllocation, idx: usize, delta: f64) -> RankAllocation {
    let mut out = alloc.clone();
    out.entries[idx].k += delta;
    out
}

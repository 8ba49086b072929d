//! End-to-end compression: learn ranks, round them, update weights, pack,
//! and evaluate the factored model against the obvious baselines.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::io::ModelContainer;
use crate::model::{evaluate, Dataset, ForwardMode, ToyModel};
use crate::pack::{pack, unpack, PackedWeight};
use crate::rank::{round_ranks, CompressionTarget, IntegerAllocation, LayerRankInt, RatioCounting};
use crate::train::{train_ranks, TrainConfig, TrainOutcome};
use crate::update::{update_all_weights, UpdateConfig, UpdateOutcome};

/// Largest rank per layer whose storage `k · cells_per_rank` stays within
/// `ratio · m · n` under `counting`.
pub fn budget_allocation(shapes: &[(String, usize, usize)], ratio: f64, counting: RatioCounting) -> IntegerAllocation {
    IntegerAllocation {
        entries: shapes
            .iter()
            .map(|(layer, m, n)| {
                let budget = ratio * (m * n) as f64;
                // Tiny slack so exact budgets are not lost to round-off.
                let k = ((budget + 1e-9) / counting.cells_per_rank(*m, *n) as f64).floor() as usize;
                LayerRankInt { layer: layer.clone(), m: *m, n: *n, k: k.min((*m).min(*n)) }
            })
            .collect(),
    }
}

/// Packs every updated weight; `None` where the layer was left dense.
pub fn pack_all(update: &UpdateOutcome) -> Result<Vec<Option<PackedWeight>>> {
    update
        .weights
        .iter()
        .zip(update.model.layers())
        .map(|(w, l)| w.as_ref().map(|w| pack(w).map_err(|e| e.in_layer(&l.name))).transpose())
        .collect()
}

/// Task loss of the factored model built from packed weights.
pub fn packed_loss(model: &ToyModel, packed: &[Option<PackedWeight>], dataset: &Dataset) -> Result<f64> {
    let factors: Vec<_> = packed.iter().map(|p| p.as_ref().map(unpack)).collect();
    Ok(evaluate(model, dataset, &ForwardMode::Factored(&factors))?.loss)
}

/// `Σ slots / Σ m n` over the packed layers.
pub fn packed_storage_ratio(packed: &[Option<PackedWeight>]) -> f64 {
    let (used, dense) = packed
        .iter()
        .flatten()
        .fold((0usize, 0usize), |(u, d), p| (u + p.slot_count(), d + p.m() * p.n()));
    if dense == 0 {
        0.0
    } else {
        used as f64 / dense as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PipelineConfig {
    pub target: CompressionTarget,
    pub train: TrainConfig,
    pub update: UpdateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub target_ratio: f64,
    /// `R_now` of the learned continuous ranks.
    pub learned_ratio: f64,
    /// Ratio of the rounded integer ranks.
    pub rounded_ratio: f64,
    /// Packed cells over dense entries.
    pub packed_ratio: f64,
    pub ranks: Vec<LayerRankInt>,
    pub dense_loss: f64,
    /// Updated weights `W̃`, unquantized.
    pub updated_loss: f64,
    /// Factored forward through the packed 8-bit factors.
    pub packed_loss: f64,
    /// Best rank-`k` approximation of each weight at the same ranks.
    pub weight_svd_loss: f64,
    pub packed_over_updated: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub training: TrainOutcome,
    pub ranks: IntegerAllocation,
    pub update: UpdateOutcome,
    pub packed: Vec<Option<PackedWeight>>,
}

impl PipelineOutcome {
    /// Container holding the packed model and its ranks.
    pub fn container(&self, base: &ToyModel, kind: Option<crate::model::TaskKind>) -> Result<ModelContainer> {
        ModelContainer::with_packed(base, kind, &self.packed, Some(self.ranks.clone()))
    }
}

/// Runs every stage on `calibration` and evaluates on `evaluation`.
pub fn run_pipeline(
    model: &ToyModel,
    calibration: &Dataset,
    evaluation: &Dataset,
    cfg: &PipelineConfig,
) -> Result<PipelineOutcome> {
    evaluation.check_against(model)?;
    let counting = cfg.train.counting;
    let training = train_ranks(model, calibration, &cfg.target, &cfg.train)?;
    let ranks = round_ranks(&training.allocation, cfg.target.r_target, counting);
    if ranks.entries.iter().any(|e| e.k == 0) {
        return Err(Error::InvalidArgument("rounded allocation contains a zero rank".into()));
    }
    let update = update_all_weights(model, calibration, &ranks, &cfg.update)?;
    let packed = pack_all(&update)?;
    let dense_loss = evaluate(model, evaluation, &ForwardMode::Dense)?.loss;
    let updated_loss = evaluate(&update.model, evaluation, &ForwardMode::Dense)?.loss;
    let packed_loss = packed_loss(model, &packed, evaluation)?;
    let weight_svd_loss = evaluate(&model.weight_truncated(&ranks)?, evaluation, &ForwardMode::Dense)?.loss;
    let report = PipelineReport {
        target_ratio: cfg.target.r_target,
        learned_ratio: training.final_ratio(counting),
        rounded_ratio: ranks.ratio(counting),
        packed_ratio: packed_storage_ratio(&packed),
        ranks: ranks.entries.clone(),
        dense_loss,
        updated_loss,
        packed_loss,
        weight_svd_loss,
        packed_over_updated: packed_loss / updated_loss,
    };
    log::info!(
        "pipeline at {:.2}: packed {:.6}, updated {:.6}, weight-svd {:.6}",
        cfg.target.r_target,
        packed_loss,
        updated_loss,
        weight_svd_loss
    );
    Ok(PipelineOutcome { report, training, ranks, update, packed })
}

/// Bytes of a traditional `k(m + n)` factorization stored as f16.
pub fn traditional_bytes(alloc: &IntegerAllocation) -> usize {
    alloc.entries.iter().map(|e| 2 * e.k * (e.m + e.n)).sum()
}

/// Bytes of the packed form: one u16 cell per slot plus two f32 scales per
/// retained direction.
pub fn packed_bytes(alloc: &IntegerAllocation) -> usize {
    alloc.entries.iter().map(|e| 2 * e.k * e.m.max(e.n) + 8 * e.k).sum()
}

/// Traditional allocation at `ratio` and the remapped allocation that fits in
/// the same number of bytes, scales included. The remapped side starts from
/// its own budget at `ratio` and gives up one rank at a time, always from the
/// layer keeping the largest fraction of its rank (ties: later layer).
pub fn equal_storage_allocations(
    shapes: &[(String, usize, usize)],
    ratio: f64,
) -> (IntegerAllocation, IntegerAllocation) {
    let traditional = budget_allocation(shapes, ratio, RatioCounting::Traditional);
    let budget = traditional_bytes(&traditional);
    let mut remapped = budget_allocation(shapes, ratio, RatioCounting::Remapped);
    while packed_bytes(&remapped) > budget {
        let fraction = |e: &LayerRankInt| e.k as f64 / e.m.min(e.n) as f64;
        let victim = remapped
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.k > 1)
            .max_by(|(_, a), (_, b)| fraction(a).total_cmp(&fraction(b)))
            .map(|(i, _)| i);
        match victim {
            Some(i) => remapped.entries[i].k -= 1,
            None => break,
        }
    }
    (remapped, traditional)
}

/// One point of the equal-storage comparison with and without remapping.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemapComparison {
    pub ratio: f64,
    pub remapped_ranks: Vec<usize>,
    pub traditional_ranks: Vec<usize>,
    /// Packed cells plus scale tables.
    pub remapped_bytes: usize,
    /// `k(m + n)` f16 values.
    pub traditional_bytes: usize,
    /// Updated weights at remapped ranks, packed to 8-bit pairs.
    pub remapped_loss: f64,
    /// Updated weights at traditional ranks, unquantized.
    pub traditional_loss: f64,
}

/// Compresses `model` twice into the same storage: remapped ranks with 8-bit
/// packing, and the traditional `k(m + n)` budget at `ratio` unquantized.
pub fn compare_remapping(
    model: &ToyModel,
    calibration: &Dataset,
    evaluation: &Dataset,
    ratio: f64,
    cfg: &UpdateConfig,
) -> Result<RemapComparison> {
    let (remap_alloc, trad_alloc) = equal_storage_allocations(&model.compressible_shapes(), ratio);
    for alloc in [&remap_alloc, &trad_alloc] {
        if alloc.entries.iter().any(|e| e.k == 0) {
            return Err(Error::InvalidArgument(format!("ratio {ratio} leaves a layer with rank 0")));
        }
    }
    if packed_bytes(&remap_alloc) > traditional_bytes(&trad_alloc) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} is too small to pack at equal storage")));
    }
    let remapped = update_all_weights(model, calibration, &remap_alloc, cfg)?;
    let packed = pack_all(&remapped)?;
    let traditional = update_all_weights(model, calibration, &trad_alloc, cfg)?;
    Ok(RemapComparison {
        ratio,
        remapped_ranks: remap_alloc.entries.iter().map(|e| e.k).collect(),
        traditional_ranks: trad_alloc.entries.iter().map(|e| e.k).collect(),
        remapped_bytes: packed_bytes(&remap_alloc),
        traditional_bytes: traditional_bytes(&trad_alloc),
        remapped_loss: packed_loss(model, &packed, evaluation)?,
        traditional_loss: evaluate(&traditional.model, evaluation, &ForwardMode::Dense)?.loss,
    })
}

//! Smooth spectral truncation, compression-ratio accounting and rank
//! allocations.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{svd_backward, BackwardConfig, UpstreamGrads};
use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::svd::{svd_full, SvdFactors};

/// Continuous truncation position `k` with smoothness `beta`.
///
/// Singular value `σ_i` (1-based `i`) is scaled by
/// `0.5·tanh(β(k − i)) + 0.5`, so `σ_k` itself keeps half its weight.
/// A hard rank-`r` truncation is the `β → ∞` limit at `k = r + 0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothTruncation {
    pub k: f64,
    pub beta: f64,
}

impl SmoothTruncation {
    pub fn new(k: f64, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        if !k.is_finite() {
            return Err(Error::InvalidArgument("truncation position must be finite".into()));
        }
        Ok(Self { k, beta })
    }

    /// Mask weight of 1-based index `i` with `k` clamped to `[0, q]`.
    pub fn weight(&self, i: usize, q: usize) -> f64 {
        let k = self.k.clamp(0.0, q as f64);
        0.5 * (self.beta * (k - i as f64)).tanh() + 0.5
    }

    /// `∂weight/∂k = 0.5·β·sech²(β(k − i))`.
    pub fn weight_derivative(&self, i: usize, q: usize) -> f64 {
        let k = self.k.clamp(0.0, q as f64);
        let t = (self.beta * (k - i as f64)).tanh();
        0.5 * self.beta * (1.0 - t * t)
    }
}

/// `T(σ_i)` for every entry of a descending spectrum.
pub fn smooth_mask(s: &[f64], t: &SmoothTruncation) -> Vec<f64> {
    let q = s.len();
    s.iter()
        .enumerate()
        .map(|(idx, &sigma)| sigma * t.weight(idx + 1, q))
        .collect()
}

/// Saved state of one smooth truncation, enough to run its backward pass.
#[derive(Debug, Clone)]
pub struct TruncationTape {
    pub factors: SvdFactors,
    truncation: SmoothTruncation,
    weights: Vec<f64>,
}

/// `U diag(T(σ)) Vᵀ` of `a`.
pub fn truncate_activation(a: &DenseMatrix, t: &SmoothTruncation) -> Result<DenseMatrix> {
    Ok(truncate_activation_taped(a, t)?.0)
}

/// [`truncate_activation`] returning the tape for [`TruncationTape::backward`].
pub fn truncate_activation_taped(
    a: &DenseMatrix,
    t: &SmoothTruncation,
) -> Result<(DenseMatrix, TruncationTape)> {
    let factors = svd_full(a)?;
    let q = factors.rank();
    let weights: Vec<f64> = (1..=q).map(|i| t.weight(i, q)).collect();
    let kept: Vec<f64> = factors.s.iter().zip(&weights).map(|(s, w)| s * w).collect();
    let out = factors.u.scale_columns(&kept).mm(&factors.vt);
    Ok((
        out,
        TruncationTape {
            factors,
            truncation: *t,
            weights,
        },
    ))
}

impl TruncationTape {
    /// Pulls `∂L/∂Ã` back to `(∂L/∂A, ∂L/∂k)`.
    pub fn backward(&self, g_out: &DenseMatrix, cfg: &BackwardConfig) -> Result<(DenseMatrix, f64)> {
        let f = &self.factors;
        let q = f.rank();
        let kept: Vec<f64> = f.s.iter().zip(&self.weights).map(|(s, w)| s * w).collect();
        let v = f.v();
        // Ã = U diag(t) Vᵀ with t_i = σ_i w_i(k).
        let g_v_proj = g_out.mm(&v); // g Ã V
        let g_u = g_v_proj.scale_columns(&kept);
        let g_vt = f.u.t_matmul(g_out).scale_rows(&kept);
        let g_t: Vec<f64> = (0..q)
            .map(|i| (0..f.u.rows()).map(|r| f.u[(r, i)] * g_v_proj[(r, i)]).sum())
            .collect();
        let g_s: Vec<f64> = g_t.iter().zip(&self.weights).map(|(g, w)| g * w).collect();
        let g_k = (0..q)
            .map(|i| g_t[i] * f.s[i] * self.truncation.weight_derivative(i + 1, q))
            .sum();
        let upstream = UpstreamGrads {
            g_u: Some(g_u),
            g_s: Some(g_s),
            g_vt: Some(g_vt),
        };
        Ok((svd_backward(f, &upstream, cfg)?, g_k))
    }
}

fn check_rank(m: usize, n: usize, k: usize) -> Result<()> {
    if k > m.min(n) {
        return Err(Error::InvalidArgument(format!(
            "rank {k} exceeds min({m}, {n})"
        )));
    }
    Ok(())
}

/// Storage ratio of separate rank-`k` factors: `k(m + n) / (mn)`.
pub fn ratio_traditional(m: usize, n: usize, k: usize) -> Result<f64> {
    check_rank(m, n, k)?;
    Ok((k * (m + n)) as f64 / (m * n) as f64)
}

/// Storage ratio under mixed-precision packing: `k·max(m, n) / (mn)`.
pub fn ratio_remapped(m: usize, n: usize, k: usize) -> Result<f64> {
    check_rank(m, n, k)?;
    Ok((k * m.max(n)) as f64 / (m * n) as f64)
}

/// Inverse of [`ratio_remapped`]: the rank whose remapped ratio is exactly
/// `ratio`, if any.
pub fn rank_for_remapped_ratio(m: usize, n: usize, ratio: f64) -> Option<usize> {
    let k = (ratio * m.min(n) as f64).round();
    if k < 0.0 || k > m.min(n) as f64 {
        return None;
    }
    let k = k as usize;
    (ratio_remapped(m, n, k).ok()? == ratio).then_some(k)
}

/// How a rank is charged against the dense parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RatioCounting {
    /// `k·max(m, n)` cells per layer.
    #[default]
    Remapped,
    /// `k(m + n)` cells per layer.
    Traditional,
}

impl RatioCounting {
    /// Cells charged per unit of rank for an `m x n` layer.
    pub fn cells_per_rank(self, m: usize, n: usize) -> usize {
        match self {
            RatioCounting::Remapped => m.max(n),
            RatioCounting::Traditional => m + n,
        }
    }
}

/// One compressible layer's continuous truncation position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRank {
    pub layer: String,
    pub m: usize,
    pub n: usize,
    pub k: f64,
}

impl LayerRank {
    pub fn max_rank(&self) -> usize {
        self.m.min(self.n)
    }
}

/// Continuous truncation positions for every compressible layer, in model
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankAllocation {
    pub entries: Vec<LayerRank>,
}

/// One compressible layer's integer rank.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRankInt {
    pub layer: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// Integer ranks for every compressible layer, in model order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerAllocation {
    pub entries: Vec<LayerRankInt>,
}

#[derive(Serialize, Deserialize)]
struct AllocEntry<K> {
    k: K,
    m: usize,
    n: usize,
}

fn alloc_to_json<K: Serialize + Copy>(items: impl Iterator<Item = (String, usize, usize, K)>) -> Result<String> {
    let map: IndexMap<String, AllocEntry<K>> = items.map(|(name, m, n, k)| (name, AllocEntry { k, m, n })).collect();
    Ok(serde_json::to_string_pretty(&map)?)
}

impl RankAllocation {
    pub fn get(&self, layer: &str) -> Option<&LayerRank> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn ks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.k).collect()
    }

    pub fn set_ks(&mut self, ks: &[f64]) {
        for (e, &k) in self.entries.iter_mut().zip(ks) {
            e.k = k;
        }
    }

    /// Clamps every `k` into `[0, min(m, n)]`.
    pub fn project(&mut self) {
        for e in &mut self.entries {
            e.k = e.k.clamp(0.0, e.max_rank() as f64);
        }
    }

    /// `{layer: {k, m, n}}` in model order.
    pub fn to_json(&self) -> Result<String> {
        alloc_to_json(self.entries.iter().map(|e| (e.layer.clone(), e.m, e.n, e.k)))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, AllocEntry<f64>> = serde_json::from_str(text)?;
        Ok(Self {
            entries: map
                .into_iter()
                .map(|(layer, e)| LayerRank { layer, m: e.m, n: e.n, k: e.k })
                .collect(),
        })
    }
}

impl IntegerAllocation {
    pub fn get(&self, layer: &str) -> Option<&LayerRankInt> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Same rank for every layer: `round(fraction · min(m, n))`.
    pub fn uniform_fraction(shapes: &[(String, usize, usize)], fraction: f64) -> Self {
        Self {
            entries: shapes
                .iter()
                .map(|(layer, m, n)| LayerRankInt {
                    layer: layer.clone(),
                    m: *m,
                    n: *n,
                    k: ((fraction * (*m).min(*n) as f64).round() as usize).min((*m).min(*n)),
                })
                .collect(),
        }
    }

    pub fn to_continuous(&self) -> RankAllocation {
        RankAllocation {
            entries: self
                .entries
                .iter()
                .map(|e| LayerRank { layer: e.layer.clone(), m: e.m, n: e.n, k: e.k as f64 })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        alloc_to_json(self.entries.iter().map(|e| (e.layer.clone(), e.m, e.n, e.k)))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, AllocEntry<f64>> = serde_json::from_str(text)?;
        let mut entries = Vec::with_capacity(map.len());
        for (layer, e) in map {
            if e.k.fract() != 0.0 || e.k < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "layer `{layer}` has non-integer rank {}",
                    e.k
                )));
            }
            check_rank(e.m, e.n, e.k as usize)?;
            entries.push(LayerRankInt { layer, m: e.m, n: e.n, k: e.k as usize });
        }
        Ok(Self { entries })
    }

    pub fn ratio(&self, counting: RatioCounting) -> f64 {
        model_ratio(&self.to_continuous(), counting)
    }
}

/// `Σ k_l·c_l / Σ m_l n_l` over the allocation's layers, with `c_l` the cells
/// per rank of `counting` and `k_l` clamped to `[0, min(m, n)]`.
pub fn model_ratio(alloc: &RankAllocation, counting: RatioCounting) -> f64 {
    let dense: usize = alloc.entries.iter().map(|e| e.m * e.n).sum();
    if dense == 0 {
        return 0.0;
    }
    let used: f64 = alloc
        .entries
        .iter()
        .map(|e| e.k.clamp(0.0, e.max_rank() as f64) * counting.cells_per_rank(e.m, e.n) as f64)
        .sum();
    used / dense as f64
}

/// `∂model_ratio/∂k_l` for every layer (constant in `k`).
pub fn model_ratio_gradient(alloc: &RankAllocation, counting: RatioCounting) -> Vec<f64> {
    let dense: usize = alloc.entries.iter().map(|e| e.m * e.n).sum();
    alloc
        .entries
        .iter()
        .map(|e| counting.cells_per_rank(e.m, e.n) as f64 / dense as f64)
        .collect()
}

/// Target ratio and the weight of the `|R_now − R_tar|` penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressionTarget {
    pub r_target: f64,
    pub ratio_penalty_weight: f64,
}

impl Default for CompressionTarget {
    fn default() -> Self {
        Self { r_target: 0.6, ratio_penalty_weight: Self::DEFAULT_PENALTY_WEIGHT }
    }
}

impl CompressionTarget {
    pub const DEFAULT_PENALTY_WEIGHT: f64 = 10.0;

    pub fn new(r_target: f64, ratio_penalty_weight: f64) -> Result<Self> {
        if !(r_target > 0.0 && r_target <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target ratio must lie in (0, 1], got {r_target}"
            )));
        }
        if !(ratio_penalty_weight > 0.0 && ratio_penalty_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "penalty weight must be positive, got {ratio_penalty_weight}"
            )));
        }
        Ok(Self { r_target, ratio_penalty_weight })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub ratio_now: f64,
    pub penalty: f64,
    pub total: f64,
}

/// `task_loss + weight·|R_now − R_tar|`.
pub fn multi_objective_loss(
    task_loss: f64,
    alloc: &RankAllocation,
    target: &CompressionTarget,
    counting: RatioCounting,
) -> LossBreakdown {
    let ratio_now = model_ratio(alloc, counting);
    let penalty = target.ratio_penalty_weight * (ratio_now - target.r_target).abs();
    LossBreakdown {
        task_loss,
        ratio_now,
        penalty,
        total: task_loss + penalty,
    }
}

/// Gradient of the penalty term with respect to every `k_l`; the subgradient
/// at the kink is zero.
pub fn penalty_gradient(
    alloc: &RankAllocation,
    target: &CompressionTarget,
    counting: RatioCounting,
) -> Vec<f64> {
    let diff = model_ratio(alloc, counting) - target.r_target;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    model_ratio_gradient(alloc, counting)
        .into_iter()
        .map(|g| target.ratio_penalty_weight * sign * g)
        .collect()
}

/// Rounds every `k` to the nearest integer in `[1, min(m, n)]`, then moves
/// single ranks by ±1 while that strictly brings the ratio closer to
/// `target`. Among improving moves the one landing nearest its layer's
/// continuous `k` wins (ties: earlier layer).
pub fn round_ranks(alloc: &RankAllocation, target: f64, counting: RatioCounting) -> IntegerAllocation {
    let mut ranks: Vec<usize> = alloc
        .entries
        .iter()
        .map(|e| (e.k.round().max(1.0) as usize).min(e.max_rank()))
        .collect();
    let dense: usize = alloc.entries.iter().map(|e| e.m * e.n).sum();
    let ratio_of = |ranks: &[usize]| -> f64 {
        alloc
            .entries
            .iter()
            .zip(ranks)
            .map(|(e, &k)| (k * counting.cells_per_rank(e.m, e.n)) as f64)
            .sum::<f64>()
            / dense as f64
    };
    loop {
        let current = (ratio_of(&ranks) - target).abs();
        let mut best: Option<(usize, usize, f64)> = None;
        for (l, e) in alloc.entries.iter().enumerate() {
            let r = ranks[l];
            let mut options = Vec::with_capacity(2);
            if r > 1 {
                options.push(r - 1);
            }
            if r < e.max_rank() {
                options.push(r + 1);
            }
            for candidate in options {
                let mut trial = ranks.clone();
                trial[l] = candidate;
                if (ratio_of(&trial) - target).abs() >= current {
                    continue;
                }
                let distance = (e.k - candidate as f64).abs();
                if best.is_none_or(|(_, _, d)| distance < d) {
                    best = Some((l, candidate, distance));
                }
            }
        }
        match best {
            Some((l, candidate, _)) => ranks[l] = candidate,
            None => break,
        }
    }
    IntegerAllocation {
        entries: alloc
            .entries
            .iter()
            .zip(ranks)
            .map(|(e, k)| LayerRankInt { layer: e.layer.clone(), m: e.m, n: e.n, k })
            .collect(),
    }
}

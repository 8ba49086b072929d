//! Rank-`k` weight update from per-sample activation subspaces.
//!
//! Each sample's activation `A_i = x_i W` contributes the leading `k` right
//! singular vectors `V_i`. The update keeps the `k`-dimensional subspace `V`
//! maximizing `Σ_i ‖VᵀV_i‖²_F`, found incrementally, and replaces `W` by
//! `W V Vᵀ`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::model::{Dataset, ToyModel};
use crate::rank::IntegerAllocation;
use crate::svd::svd_full;

/// Leading right-singular directions of one sample's activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedBasis {
    pub v: DenseMatrix,
    pub sample_index: usize,
}

/// Leading `k` right-singular vectors of `a` (`n x k`).
pub fn projected_basis_of(a: &DenseMatrix, k: usize, sample_index: usize) -> Result<ProjectedBasis> {
    let f = svd_full(a)?;
    if k > f.rank() {
        return Err(Error::InvalidArgument(format!(
            "rank {k} exceeds the {} singular values of a {}x{} activation",
            f.rank(),
            a.rows(),
            a.cols()
        )));
    }
    Ok(ProjectedBasis {
        v: f.v().leading_columns(k),
        sample_index,
    })
}

/// Basis of layer `layer`'s activation on `input`, with the layers before it
/// evaluated densely as they currently stand in `model`.
pub fn collect_projected_basis(
    model: &ToyModel,
    input: &DenseMatrix,
    sample_index: usize,
    layer: usize,
    k: usize,
) -> Result<ProjectedBasis> {
    let h = model.forward_prefix(input, layer)?;
    let a = h.matmul(&model.layers()[layer].weight)?;
    projected_basis_of(&a, k, sample_index)
}

/// Running state of the incremental subspace search.
///
/// Besides the `k` directions it reports, the state carries up to
/// `oversample` further directions so that mass truncated early can still
/// win later; memory stays `n·(k + oversample)`.
#[derive(Debug, Clone)]
pub struct IpcaState {
    pub mean: Vec<f64>,
    /// Retained directions in descending weight order, `n x r` with
    /// `r ≤ k + oversample`.
    pub retained: DenseMatrix,
    /// Singular values paired with the retained directions.
    pub weights: Vec<f64>,
    /// Samples absorbed.
    pub count: usize,
    /// Columns absorbed.
    pub observations: usize,
    pub k: usize,
    pub oversample: usize,
    pub centered: bool,
}

impl IpcaState {
    /// State retaining `2k` directions.
    pub fn new(n: usize, k: usize, centered: bool) -> Self {
        Self::with_oversample(n, k, k, centered)
    }

    pub fn with_oversample(n: usize, k: usize, oversample: usize, centered: bool) -> Self {
        Self {
            mean: vec![0.0; n],
            retained: DenseMatrix::zeros(n, 0),
            weights: Vec::new(),
            count: 0,
            observations: 0,
            k,
            oversample,
            centered,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn capacity(&self) -> usize {
        (self.k + self.oversample).min(self.dim())
    }

    /// Current leading `k` directions (fewer until `k` have been seen).
    pub fn basis(&self) -> DenseMatrix {
        self.retained.leading_columns(self.k.min(self.retained.cols()))
    }
}

/// Absorbs one sample's columns as observations in `ℝⁿ`.
///
/// The retained directions enter the concatenation scaled by their singular
/// values, so the SVD sees the accumulated second-moment matrix. In centered
/// mode the incoming columns are mean-subtracted and a mean-shift column
/// `sqrt(n_old·n_in/(n_old + n_in))·(μ_old − v̄)` is appended. The first
/// sample initializes the state to its own leading columns.
pub fn ipca_absorb(mut state: IpcaState, v: &ProjectedBasis) -> Result<IpcaState> {
    let n = state.dim();
    if v.v.rows() != n {
        return Err(Error::shape(
            "ipca_absorb",
            format!("basis has {} rows, state dimension is {n}", v.v.rows()),
        ));
    }
    let incoming = v.v.cols();
    if incoming == 0 {
        return Ok(state);
    }
    let batch_mean: Vec<f64> = (0..n)
        .map(|r| v.v.row(r).iter().sum::<f64>() / incoming as f64)
        .collect();
    let n_old = state.observations as f64;
    let n_in = incoming as f64;
    state.count += 1;

    if state.count == 1 {
        let r = state.capacity().min(incoming);
        state.retained = v.v.leading_columns(r);
        state.weights = vec![1.0; r];
        state.mean = batch_mean;
        state.observations = incoming;
        return Ok(state);
    }

    let mut concat = state.retained.scale_columns(&state.weights);
    if state.centered {
        let centered = DenseMatrix::from_fn(n, incoming, |r, c| v.v[(r, c)] - batch_mean[r]);
        let shift = (n_old * n_in / (n_old + n_in)).sqrt();
        let correction = DenseMatrix::from_fn(n, 1, |r, _| shift * (state.mean[r] - batch_mean[r]));
        concat = concat.hcat(&centered)?.hcat(&correction)?;
    } else {
        concat = concat.hcat(&v.v)?;
    }
    for (m, b) in state.mean.iter_mut().zip(&batch_mean) {
        *m += (b - *m) * n_in / (n_old + n_in);
    }
    state.observations += incoming;

    let f = svd_full(&concat)?;
    let r = state.capacity().min(f.rank());
    state.retained = f.u.leading_columns(r);
    state.weights = f.s[..r].to_vec();
    Ok(state)
}

/// `Σ_i ‖VᵀV_i‖²_F`.
pub fn subspace_objective(v: &DenseMatrix, bases: &[ProjectedBasis]) -> f64 {
    bases
        .iter()
        .map(|b| {
            let p = v.t_matmul(&b.v);
            p.data().iter().map(|x| x * x).sum::<f64>()
        })
        .sum()
}

/// Top-`k` eigenvectors of `Σ_i V_i V_iᵀ`, the exact maximizer of
/// [`subspace_objective`].
pub fn batch_subspace_oracle(bases: &[ProjectedBasis], k: usize) -> Result<DenseMatrix> {
    let first = bases
        .first()
        .ok_or_else(|| Error::InvalidArgument("oracle needs at least one basis".into()))?;
    let n = first.v.rows();
    if k > n {
        return Err(Error::InvalidArgument(format!("rank {k} exceeds dimension {n}")));
    }
    let mut m = DenseMatrix::zeros(n, n);
    for b in bases {
        if b.v.rows() != n {
            return Err(Error::shape("batch_subspace_oracle", "bases differ in dimension"));
        }
        m.add_assign(&b.v.matmul_t(&b.v));
    }
    let eig = m
        .to_faer()
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| Error::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let values = eig.S().column_vector();
    let vectors = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    Ok(DenseMatrix::from_fn(n, k, |r, c| vectors[(r, order[c])]))
}

/// Stacked-batch alternative: SVD of all bases side by side. Holds every
/// observation at once; kept as the memory baseline for the incremental path.
pub fn batch_stacked_pca(bases: &[ProjectedBasis], k: usize) -> Result<DenseMatrix> {
    let first = bases
        .first()
        .ok_or_else(|| Error::InvalidArgument("stacked PCA needs at least one basis".into()))?;
    let mut stacked = first.v.clone();
    for b in &bases[1..] {
        stacked = stacked.hcat(&b.v)?;
    }
    let f = svd_full(&stacked)?;
    Ok(f.u.leading_columns(k.min(f.rank())))
}

/// Weight after the update, `W V Vᵀ`, kept in f64 until written out.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdatedWeight {
    pub w_tilde: DenseMatrix,
    pub k: usize,
}

/// `W (V Vᵀ)` for an orthonormal `n x k` basis.
pub fn finalize_weight(w: &DenseMatrix, basis: &DenseMatrix) -> Result<UpdatedWeight> {
    if basis.rows() != w.cols() {
        return Err(Error::shape(
            "finalize_weight",
            format!("{}x{} weight against a basis of dimension {}", w.rows(), w.cols(), basis.rows()),
        ));
    }
    let projector = basis.matmul_t(basis);
    Ok(UpdatedWeight {
        w_tilde: w.mm(&projector),
        k: basis.cols(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct UpdateConfig {
    pub centered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerUpdateReport {
    pub layer: String,
    pub k: usize,
    pub samples: usize,
    pub objective_ipca: f64,
    pub objective_oracle: f64,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub model: ToyModel,
    pub weights: Vec<Option<UpdatedWeight>>,
    pub reports: Vec<LayerUpdateReport>,
}

impl UpdateOutcome {
    /// `layer,k,samples,objective_ipca,objective_oracle,ratio_to_oracle`.
    pub fn write_objective_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "k", "samples", "objective_ipca", "objective_oracle", "ratio_to_oracle"])?;
        for r in &self.reports {
            let ratio = if r.objective_oracle > 0.0 {
                r.objective_ipca / r.objective_oracle
            } else {
                1.0
            };
            w.write_record([
                r.layer.clone(),
                r.k.to_string(),
                r.samples.to_string(),
                r.objective_ipca.to_string(),
                r.objective_oracle.to_string(),
                ratio.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Replaces every compressible layer by its rank-`k` update, front to back,
/// so each layer's activations are taken after the updates upstream of it.
pub fn update_all_weights(
    model: &ToyModel,
    dataset: &Dataset,
    alloc: &IntegerAllocation,
    cfg: &UpdateConfig,
) -> Result<UpdateOutcome> {
    if dataset.samples.is_empty() {
        return Err(Error::InvalidArgument("weight update needs at least one sample".into()));
    }
    let mut updated = model.clone();
    let mut hidden: Vec<DenseMatrix> = dataset.samples.iter().map(|s| s.input.clone()).collect();
    let mut weights = vec![None; model.layers().len()];
    let mut reports = Vec::new();
    for idx in 0..model.layers().len() {
        let layer = &model.layers()[idx];
        let activations: Vec<DenseMatrix> = hidden
            .par_iter()
            .map(|h| h.matmul(&layer.weight))
            .collect::<Result<_>>()?;
        if layer.compressible {
            let entry = alloc
                .get(&layer.name)
                .ok_or_else(|| Error::InvalidArgument(format!("allocation has no entry for `{}`", layer.name)))?;
            let name = layer.name.clone();
            let result = (|| -> Result<(UpdatedWeight, LayerUpdateReport)> {
                let bases: Vec<ProjectedBasis> = activations
                    .par_iter()
                    .enumerate()
                    .map(|(i, a)| projected_basis_of(a, entry.k, i))
                    .collect::<Result<_>>()?;
                let n = layer.weight.cols();
                let mut state = IpcaState::new(n, entry.k, cfg.centered);
                for b in &bases {
                    state = ipca_absorb(state, b)?;
                }
                let oracle = batch_subspace_oracle(&bases, entry.k)?;
                let w = finalize_weight(&layer.weight, &state.basis())?;
                let report = LayerUpdateReport {
                    layer: name.clone(),
                    k: entry.k,
                    samples: bases.len(),
                    objective_ipca: subspace_objective(&state.basis(), &bases),
                    objective_oracle: subspace_objective(&oracle, &bases),
                };
                Ok((w, report))
            })();
            let (w, report) = result.map_err(|e| e.in_layer(&name))?;
            log::info!(
                "updated `{}` at rank {}: objective {:.6} (oracle {:.6})",
                report.layer,
                report.k,
                report.objective_ipca,
                report.objective_oracle
            );
            updated.set_weight(idx, w.w_tilde.clone())?;
            weights[idx] = Some(w);
            reports.push(report);
        }
        let layer = &updated.layers()[idx];
        hidden = hidden
            .par_iter()
            .map(|h| Ok(layer.activation.apply(&h.matmul(&layer.weight)?)))
            .collect::<Result<_>>()?;
    }
    Ok(UpdateOutcome { model: updated, weights, reports })
}

//! Stabilized backward pass through the thin SVD, plus a finite-difference
//! checker for it.
//!
//! For `A = U diag(s) Vᵀ` with upstream gradients `g_U`, `g_s`, `g_V` the
//! gradient is
//!
//! ```text
//! g_A = U (Ω_U diag(s) + diag(s) Ω_V + diag(g_s)) Vᵀ
//!     + (I − UUᵀ) g_U diag(1/s) Vᵀ + U diag(1/s) g_Vᵀ (I − VVᵀ)
//! Ω_U = (UᵀG_U − G_UᵀU) ∘ E,   Ω_V = (VᵀG_V − G_VᵀV) ∘ E
//! ```
//!
//! where `E[i][j]` approximates `1 / (s_j² − s_i²)`. Close, equal and
//! vanishing pairs make that reciprocal blow up, so [`build_stable_e_recip`]
//! replaces it with a truncated geometric series, its equal-value limit, or a
//! small constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::svd::{svd_full, SvdFactors};

/// Scale applied to `X − Xᵀ` inside the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkewConvention {
    /// `X − Xᵀ`. This is the scaling under which the backward pass agrees
    /// with finite differences.
    #[default]
    Full,
    /// `(X − Xᵀ)/2`, off by a factor of two in the rotation terms. Kept so the
    /// discrepancy can be demonstrated.
    Half,
}

/// Thresholds of the stabilized reciprocal table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackwardConfig {
    /// Floor applied to singular values before any division.
    pub eps_val: f64,
    /// Value used for `1/E_ij` when both singular values sit at the floor.
    pub eps_grad: f64,
    /// Pairs closer than this use the truncated geometric series.
    pub eps_diff: f64,
    /// Number of series terms.
    pub n_taylor: u32,
    #[serde(default)]
    pub skew: SkewConvention,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self {
            eps_val: 1e-12,
            eps_grad: 1e-10,
            eps_diff: 1e-6,
            n_taylor: 10,
            skew: SkewConvention::Full,
        }
    }
}

impl BackwardConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.eps_val) && positive(self.eps_grad) && positive(self.eps_diff)) {
            return Err(Error::InvalidArgument(format!(
                "backward thresholds must be positive: {self:?}"
            )));
        }
        if self.n_taylor == 0 {
            return Err(Error::InvalidArgument("n_taylor must be at least 1".into()));
        }
        Ok(())
    }
}

/// Upstream gradients with respect to `U` (`m x q`), `s` (`q`) and `Vᵀ`
/// (`q x n`). Absent channels are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct UpstreamGrads {
    pub g_u: Option<DenseMatrix>,
    pub g_s: Option<Vec<f64>>,
    pub g_vt: Option<DenseMatrix>,
}

/// `(X − Xᵀ)/2`, the skew-symmetric part of a square matrix.
pub fn skew_part(x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != x.cols() {
        return Err(Error::shape(
            "skew_part",
            format!("{}x{} is not square", x.rows(), x.cols()),
        ));
    }
    let n = x.rows();
    Ok(DenseMatrix::from_fn(n, n, |i, j| 0.5 * (x[(i, j)] - x[(j, i)])))
}

/// Which rule produced an entry of the reciprocal table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReciprocalCase {
    /// Both singular values at the `eps_val` floor.
    TooSmall,
    /// Exactly equal after clamping.
    Equal,
    /// `0 < |σ_i − σ_j| ≤ eps_diff`.
    Close,
    /// Everything else: the exact reciprocal.
    Far,
}

/// Exact `1 / (big² − small²)` in factored form.
pub fn reciprocal_far(big: f64, small: f64) -> f64 {
    1.0 / ((big - small) * (big + small))
}

/// `(1/big²) (1 − r^{2K}) / (1 − r²)` with `r = small / big`: the first `K`
/// terms of the geometric expansion of `1 / (big² − small²)`.
///
/// Evaluated as `expm1(2K·ℓ) / expm1(2ℓ)` with `ℓ = ln(1 − (big − small)/big)`
/// so that pairs a few ulps apart keep full precision; the naive quotient
/// loses about `log10(1/(1 − r²))` digits to cancellation.
pub fn reciprocal_close(big: f64, small: f64, n_taylor: u32) -> f64 {
    let log_ratio = (-(big - small) / big).ln_1p();
    let series = (2.0 * n_taylor as f64 * log_ratio).exp_m1() / (2.0 * log_ratio).exp_m1();
    series / (big * big)
}

/// Limit of [`reciprocal_close`] as `small → big`: `K / big²`.
pub fn reciprocal_equal(big: f64, n_taylor: u32) -> f64 {
    n_taylor as f64 / (big * big)
}

/// Stabilized `1 / (big² − small²)` for a pair with `big ≥ small ≥ 0`.
pub fn stable_reciprocal(big: f64, small: f64, cfg: &BackwardConfig) -> (f64, ReciprocalCase) {
    let big = big.max(cfg.eps_val);
    let small = small.max(cfg.eps_val);
    let diff = (big - small).abs();
    if big == cfg.eps_val && small == cfg.eps_val {
        (cfg.eps_grad, ReciprocalCase::TooSmall)
    } else if diff == 0.0 {
        (reciprocal_equal(big, cfg.n_taylor), ReciprocalCase::Equal)
    } else if diff <= cfg.eps_diff {
        (reciprocal_close(big, small, cfg.n_taylor), ReciprocalCase::Close)
    } else {
        (reciprocal_far(big, small), ReciprocalCase::Far)
    }
}

/// `q x q` table of stabilized reciprocals `1 / (s_j² − s_i²)`.
///
/// The strictly lower triangle (`i > j`, so `s_j ≥ s_i`) holds
/// [`stable_reciprocal`]`(s_j, s_i)`, the upper triangle is minus its
/// transpose and the diagonal is 1.
pub fn build_stable_e_recip(s: &[f64], cfg: &BackwardConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    if s.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument(
            "singular values must be sorted in descending order".into(),
        ));
    }
    let q = s.len();
    let mut e = DenseMatrix::identity(q);
    for i in 0..q {
        for j in 0..i {
            let (value, _) = stable_reciprocal(s[j], s[i], cfg);
            e[(i, j)] = value;
            e[(j, i)] = -value;
        }
    }
    Ok(e)
}

fn skew_scaled(x: &DenseMatrix, convention: SkewConvention) -> DenseMatrix {
    let factor = match convention {
        SkewConvention::Full => 1.0,
        SkewConvention::Half => 0.5,
    };
    let n = x.rows();
    DenseMatrix::from_fn(n, n, |i, j| factor * (x[(i, j)] - x[(j, i)]))
}

fn all_zero(m: &Option<DenseMatrix>) -> bool {
    m.as_ref().is_none_or(|m| m.data().iter().all(|&v| v == 0.0))
}

/// Gradient of a scalar loss with respect to the decomposed matrix.
pub fn svd_backward(f: &SvdFactors, g: &UpstreamGrads, cfg: &BackwardConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    let (m, q) = f.u.shape();
    let n = f.vt.cols();
    if f.s.len() != q || f.vt.rows() != q {
        return Err(Error::shape("svd_backward", "inconsistent factor shapes"));
    }
    if let Some(gu) = &g.g_u {
        if gu.shape() != (m, q) {
            return Err(Error::shape(
                "svd_backward",
                format!("g_u is {:?}, expected {:?}", gu.shape(), (m, q)),
            ));
        }
    }
    if let Some(gvt) = &g.g_vt {
        if gvt.shape() != (q, n) {
            return Err(Error::shape(
                "svd_backward",
                format!("g_vt is {:?}, expected {:?}", gvt.shape(), (q, n)),
            ));
        }
    }
    if let Some(gs) = &g.g_s {
        if gs.len() != q {
            return Err(Error::shape(
                "svd_backward",
                format!("g_s has {} entries, expected {q}", gs.len()),
            ));
        }
    }

    let gs_zero = g.g_s.as_ref().is_none_or(|v| v.iter().all(|&x| x == 0.0));
    let rotations_zero = all_zero(&g.g_u) && all_zero(&g.g_vt);
    if rotations_zero && gs_zero {
        return Ok(DenseMatrix::zeros(m, n));
    }
    let gs = g.g_s.clone().unwrap_or_else(|| vec![0.0; q]);
    if rotations_zero {
        return Ok(f.u.scale_columns(&gs).mm(&f.vt));
    }

    let e = build_stable_e_recip(&f.s, cfg)?;
    let clamped: Vec<f64> = f.s.iter().map(|&v| v.max(cfg.eps_val)).collect();
    let inv: Vec<f64> = clamped.iter().map(|v| 1.0 / v).collect();
    let v = f.vt.transpose();

    // Inner q x q core: Ω_U diag(s) + diag(s) Ω_V + diag(g_s).
    let mut core = DenseMatrix::diag(&gs);
    if let Some(gu) = &g.g_u {
        let omega_u = skew_scaled(&f.u.t_matmul(gu), cfg.skew).hadamard(&e)?;
        core.add_assign(&omega_u.scale_columns(&f.s));
    }
    let gv = g.g_vt.as_ref().map(DenseMatrix::transpose);
    if let Some(gv) = &gv {
        let omega_v = skew_scaled(&v.t_matmul(gv), cfg.skew).hadamard(&e)?;
        core.add_assign(&omega_v.scale_rows(&f.s));
    }
    let mut grad = f.u.mm(&core).mm(&f.vt);

    // (I − UUᵀ) g_U diag(1/s) Vᵀ
    if let Some(gu) = &g.g_u {
        let scaled = gu.scale_columns(&inv);
        let residual = scaled.sub(&f.u.mm(&f.u.t_matmul(&scaled)))?;
        grad.add_assign(&residual.mm(&f.vt));
    }
    // U diag(1/s) g_Vᵀ (I − VVᵀ)
    if let Some(gvt) = &g.g_vt {
        let scaled = gvt.scale_rows(&inv);
        let residual = scaled.sub(&scaled.mm(&v).mm(&f.vt))?;
        grad.add_assign(&f.u.mm(&residual));
    }

    if !grad.is_finite() {
        return Err(Error::NonFinite("svd_backward output"));
    }
    Ok(grad)
}

/// Loss term `½‖U_k diag(s_k) V_kᵀ − target‖_F²` over the leading `k` triplets.
#[derive(Debug, Clone)]
pub struct ReconstructionTerm {
    pub k: usize,
    pub target: DenseMatrix,
}

/// Scalar loss of the SVD factors used by [`grad_check`]:
/// `Σ w_i s_i + ⟨C_U, U⟩ + ⟨C_V, V⟩ + ½‖A_k − B‖_F²`, each term optional.
#[derive(Debug, Clone, Default)]
pub struct LossSpec {
    pub sigma_weights: Option<Vec<f64>>,
    /// `m x q`, paired with `U`.
    pub u_weights: Option<DenseMatrix>,
    /// `n x q`, paired with `V`.
    pub v_weights: Option<DenseMatrix>,
    pub reconstruction: Option<ReconstructionTerm>,
}

impl LossSpec {
    /// All three gradient channels with seeded random weights.
    pub fn random(m: usize, n: usize, seed: u64) -> Self {
        let mut rng = crate::rng::seeded(seed);
        let q = m.min(n);
        let sigma = crate::rng::gaussian_matrix(&mut rng, 1, q).into_data();
        Self {
            sigma_weights: Some(sigma),
            u_weights: Some(crate::rng::gaussian_matrix(&mut rng, m, q)),
            v_weights: Some(crate::rng::gaussian_matrix(&mut rng, n, q)),
            reconstruction: None,
        }
    }

    /// True when the loss depends on individual singular vectors rather than
    /// only on singular values and spectral projectors.
    pub fn depends_on_vectors(&self) -> bool {
        self.u_weights.is_some() || self.v_weights.is_some()
    }

    pub fn evaluate(&self, f: &SvdFactors) -> f64 {
        let mut total = 0.0;
        if let Some(w) = &self.sigma_weights {
            total += w.iter().zip(&f.s).map(|(a, b)| a * b).sum::<f64>();
        }
        if let Some(cu) = &self.u_weights {
            total += cu.inner(&f.u);
        }
        if let Some(cv) = &self.v_weights {
            total += cv.inner(&f.v());
        }
        if let Some(term) = &self.reconstruction {
            let approx = f.truncated(term.k).reconstruct();
            total += 0.5 * approx.distance(&term.target).powi(2);
        }
        total
    }

    pub fn upstream(&self, f: &SvdFactors) -> UpstreamGrads {
        let (m, q) = f.u.shape();
        let n = f.vt.cols();
        let mut g_s = self.sigma_weights.clone();
        let mut g_u = self.u_weights.clone();
        let mut g_vt = self.v_weights.as_ref().map(DenseMatrix::transpose);
        if let Some(term) = &self.reconstruction {
            let k = term.k.min(q);
            let tr = f.truncated(k);
            let residual = tr.reconstruct().sub(&term.target).expect("target shape");
            // dL/dU_k = R V_k diag(s_k), dL/dV_kᵀ = diag(s_k) U_kᵀ R, dL/ds_k = diag(U_kᵀ R V_k)
            let du = residual.mm(&tr.v()).scale_columns(&tr.s);
            let dvt = tr.u.t_matmul(&residual).scale_rows(&tr.s);
            let uk_r_vk = tr.u.t_matmul(&residual).mm(&tr.v());
            let gu = g_u.get_or_insert_with(|| DenseMatrix::zeros(m, q));
            let gvt = g_vt.get_or_insert_with(|| DenseMatrix::zeros(q, n));
            let gs = g_s.get_or_insert_with(|| vec![0.0; q]);
            for i in 0..k {
                gs[i] += uk_r_vk[(i, i)];
                for r in 0..m {
                    gu[(r, i)] += du[(r, i)];
                }
                for c in 0..n {
                    gvt[(i, c)] += dvt[(i, c)];
                }
            }
        }
        UpstreamGrads { g_u, g_s, g_vt }
    }
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`. The
    /// floor makes any absolute error below `1e-7` pass a `1e-4` check.
    pub max_rel_error: f64,
    /// Number of entries compared against finite differences.
    pub probe_count: usize,
    pub all_finite: bool,
    /// Spectrum had ties or vanishing values; vector-dependent comparisons
    /// were skipped because the factors are not unique there.
    pub degenerate: bool,
    /// Largest analytic gradient entry.
    pub max_grad_abs: f64,
}

/// Denominator floor of the relative error in [`GradCheckReport`].
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Relative gap below which a spectrum counts as degenerate.
pub const DEGENERACY_GAP: f64 = 1e-6;

fn is_degenerate(a: &DenseMatrix, s: &[f64]) -> bool {
    let Some(&top) = s.first() else { return true };
    if top == 0.0 {
        return true;
    }
    let tie = s.windows(2).any(|w| w[0] - w[1] <= DEGENERACY_GAP * top);
    let vanishing = a.rows() != a.cols() && s.last().is_some_and(|&v| v <= DEGENERACY_GAP * top);
    tie || vanishing
}

/// Compares [`svd_backward`] against central differences of `loss` with step
/// `h`. Never fails on pathological spectra; they surface in the report.
pub fn grad_check(a: &DenseMatrix, loss: &LossSpec, cfg: &BackwardConfig, h: f64) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let f = svd_full(a)?;
    let analytic = match svd_backward(&f, &loss.upstream(&f), cfg) {
        Ok(g) => g,
        Err(Error::NonFinite(_)) => {
            return Ok(GradCheckReport {
                max_abs_error: f64::INFINITY,
                max_rel_error: f64::INFINITY,
                probe_count: 0,
                all_finite: false,
                degenerate: is_degenerate(a, &f.s),
                max_grad_abs: f64::INFINITY,
            })
        }
        Err(e) => return Err(e),
    };
    let degenerate = is_degenerate(a, &f.s);
    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        probe_count: 0,
        all_finite: analytic.is_finite(),
        degenerate,
        max_grad_abs: analytic.max_abs(),
    };
    if degenerate {
        return Ok(report);
    }
    let (m, n) = a.shape();
    for r in 0..m {
        for c in 0..n {
            let mut plus = a.clone();
            plus[(r, c)] += h;
            let mut minus = a.clone();
            minus[(r, c)] -= h;
            let numeric = (loss.evaluate(&svd_full(&plus)?) - loss.evaluate(&svd_full(&minus)?)) / (2.0 * h);
            let exact = analytic[(r, c)];
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.probe_count += 1;
        }
    }
    Ok(report)
}

/// Well-separated test matrix number `index` of a certification run: shapes
/// cycle through `m ∈ 3..=8`, `n ∈ 3..=6`, and consecutive singular values
/// differ by at least 0.15 with the smallest at least 0.2.
pub fn certification_case(seed: u64, index: usize) -> (DenseMatrix, LossSpec) {
    use rand::Rng;
    let m = 3 + index % 6;
    let n = 3 + (index / 6) % 4;
    let mut rng = crate::rng::seeded(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let q = m.min(n);
    let mut spectrum = vec![0.0; q];
    let mut next = rng.random_range(0.2..0.8);
    for v in spectrum.iter_mut().rev() {
        *v = next;
        next += rng.random_range(0.15..1.0);
    }
    let a = crate::rng::with_singular_values(&mut rng, m, n, &spectrum);
    let loss = LossSpec::random(m, n, rng.random());
    (a, loss)
}

/// Deliberately degenerate matrix number `index`: exact ties, ties within
/// 1e-13, a singular value at 1e-12, exact rank deficiency, and the zero
/// matrix, in rotation. The loss is rotation invariant (a σ-weighted sum and
/// a rank-`k` reconstruction with `k` at a spectral gap), since singular
/// vectors are not unique on these spectra.
pub fn degenerate_case(seed: u64, index: usize) -> (DenseMatrix, LossSpec) {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed ^ 0xDE6E_0000 ^ index as u64);
    let m = rng.random_range(3..=8);
    let n = rng.random_range(3..=6);
    let q = m.min(n);
    let mut spectrum: Vec<f64> = (0..q).map(|i| 3.0 - 0.4 * i as f64).collect();
    let k = match index % 5 {
        0 => {
            spectrum[1] = spectrum[0];
            2
        }
        1 => {
            spectrum[q - 1] = spectrum[q - 2] - 1e-13;
            1
        }
        2 => {
            spectrum[q - 1] = 1e-12;
            1
        }
        3 => {
            spectrum[q - 1] = 0.0;
            spectrum[q - 2] = 0.0;
            1
        }
        _ => {
            spectrum.iter_mut().for_each(|v| *v = 0.0);
            1
        }
    };
    let a = crate::rng::with_singular_values(&mut rng, m, n, &spectrum);
    let loss = LossSpec {
        sigma_weights: Some(crate::rng::gaussian_matrix(&mut rng, 1, q).into_data()),
        reconstruction: Some(ReconstructionTerm { k, target: crate::rng::gaussian_matrix(&mut rng, m, n) }),
        ..LossSpec::default()
    };
    (a, loss)
}

/// Summary of a batch of gradient checks.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CertificationReport {
    pub cases: usize,
    pub degenerate_cases: usize,
    /// Entries compared against finite differences, over all cases.
    pub probe_count: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub all_finite: bool,
    pub max_grad_abs: f64,
    /// Largest `max |g_A| / ‖upstream‖_F` over the cases.
    pub max_gain: f64,
}

/// Runs [`grad_check`] on `count` cases from `make` with step `h`.
pub fn certify(
    count: usize,
    make: impl Fn(usize) -> (DenseMatrix, LossSpec),
    cfg: &BackwardConfig,
    h: f64,
) -> Result<CertificationReport> {
    let mut out = CertificationReport {
        cases: count,
        degenerate_cases: 0,
        probe_count: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        all_finite: true,
        max_grad_abs: 0.0,
        max_gain: 0.0,
    };
    for i in 0..count {
        let (a, loss) = make(i);
        let r = grad_check(&a, &loss, cfg, h)?;
        let up = loss.upstream(&svd_full(&a)?);
        let norm = [up.g_u.as_ref(), up.g_vt.as_ref()]
            .into_iter()
            .flatten()
            .map(|g| g.frobenius_norm().powi(2))
            .sum::<f64>()
            + up.g_s.iter().flatten().map(|v| v * v).sum::<f64>();
        if norm > 0.0 {
            out.max_gain = out.max_gain.max(r.max_grad_abs / norm.sqrt());
        }
        out.degenerate_cases += r.degenerate as usize;
        out.probe_count += r.probe_count;
        out.max_rel_error = out.max_rel_error.max(r.max_rel_error);
        out.max_abs_error = out.max_abs_error.max(r.max_abs_error);
        out.all_finite &= r.all_finite;
        out.max_grad_abs = out.max_grad_abs.max(r.max_grad_abs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded, with_singular_values};

    /// Explicit term-by-term sum `(1/big²) Σ_{t<K} (small/big)^{2t}`.
    fn taylor_terms(big: f64, small: f64, k: u32) -> f64 {
        let q2 = (small / big) * (small / big);
        let mut term = 1.0;
        let mut sum = 0.0;
        for _ in 0..k {
            sum += term;
            term *= q2;
        }
        sum / (big * big)
    }

    #[test]
    fn skew_of_symmetric_is_zero() {
        let mut rng = seeded(1);
        let x = gaussian_matrix(&mut rng, 4, 4);
        let sym = x.add(&x.transpose()).unwrap();
        assert_eq!(skew_part(&sym).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn skew_of_antisymmetric_is_identity_map() {
        let mut rng = seeded(2);
        let x = gaussian_matrix(&mut rng, 4, 4);
        let anti = skew_part(&x).unwrap();
        assert_eq!(skew_part(&anti).unwrap(), anti);
    }

    #[test]
    fn skew_matches_formula_and_is_antisymmetric() {
        let mut rng = seeded(3);
        let x = gaussian_matrix(&mut rng, 4, 4);
        let s = skew_part(&x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s[(i, j)], 0.5 * (x[(i, j)] - x[(j, i)]));
                assert_eq!(s[(i, j)] + s[(j, i)], 0.0);
            }
        }
        assert!(skew_part(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn e_recip_far_case() {
        let e = build_stable_e_recip(&[3.0, 1.0], &BackwardConfig::default()).unwrap();
        assert_eq!(e[(1, 0)], 0.125);
        assert_eq!(e[(0, 1)], -0.125);
        assert_eq!(e[(0, 0)], 1.0);
        assert_eq!(e[(1, 1)], 1.0);
    }

    #[test]
    fn e_recip_equal_case_uses_term_count() {
        let e = build_stable_e_recip(&[2.0, 2.0], &BackwardConfig::default()).unwrap();
        assert_eq!(e[(1, 0)], 2.5);
        assert_eq!(e[(0, 1)], -2.5);
    }

    #[test]
    fn e_recip_close_case_is_geometric_sum() {
        let cfg = BackwardConfig::default();
        let small = 1.0 - 1e-9;
        let e = build_stable_e_recip(&[1.0, small], &cfg).unwrap();
        let q = small;
        let naive = (1.0 - q.powi(20)) / (1.0 - q * q);
        let explicit = taylor_terms(1.0, small, 10);
        assert!((e[(1, 0)] - explicit).abs() <= 1e-13 * explicit, "{} vs {explicit}", e[(1, 0)]);
        // The textbook quotient agrees only to its cancellation error.
        assert!((naive - explicit).abs() <= 1e-6 * explicit);
    }

    #[test]
    fn e_recip_too_small_case() {
        let cfg = BackwardConfig::default();
        let e = build_stable_e_recip(&[1.0, 1e-14, 0.0], &cfg).unwrap();
        assert_eq!(e[(2, 1)], cfg.eps_grad);
        assert_eq!(stable_reciprocal(1e-14, 0.0, &cfg).1, ReciprocalCase::TooSmall);
        // Only one of the pair is clamped: exact reciprocal of the clamped pair.
        assert_eq!(stable_reciprocal(1.0, 0.0, &cfg).1, ReciprocalCase::Far);
    }

    #[test]
    fn e_recip_rejects_unsorted_or_negative() {
        let cfg = BackwardConfig::default();
        assert!(build_stable_e_recip(&[1.0, 2.0], &cfg).is_err());
        assert!(build_stable_e_recip(&[1.0, -0.5], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackwardConfig::default();
        cfg.n_taylor = 0;
        assert!(cfg.validate().is_err());
        let cfg = BackwardConfig { eps_val: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut rng = seeded(4);
        let f = svd_full(&gaussian_matrix(&mut rng, 5, 4)).unwrap();
        let g = UpstreamGrads {
            g_u: Some(DenseMatrix::zeros(5, 4)),
            g_s: Some(vec![0.0; 4]),
            g_vt: None,
        };
        let out = svd_backward(&f, &g, &BackwardConfig::default()).unwrap();
        assert_eq!(out, DenseMatrix::zeros(5, 4));
    }

    #[test]
    fn sigma_only_upstream() {
        let mut rng = seeded(5);
        let f = svd_full(&gaussian_matrix(&mut rng, 5, 4)).unwrap();
        let gs = vec![1.0, -2.0, 0.5, 3.0];
        let g = UpstreamGrads { g_s: Some(gs.clone()), ..Default::default() };
        let out = svd_backward(&f, &g, &BackwardConfig::default()).unwrap();
        assert_eq!(out, f.u.scale_columns(&gs).mm(&f.vt));
    }

    #[test]
    fn backward_shape_errors() {
        let mut rng = seeded(6);
        let f = svd_full(&gaussian_matrix(&mut rng, 5, 4)).unwrap();
        let g = UpstreamGrads { g_u: Some(DenseMatrix::zeros(4, 4)), ..Default::default() };
        assert!(matches!(
            svd_backward(&f, &g, &BackwardConfig::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gapped_5x4_matches_finite_differences() {
        let mut rng = seeded(7);
        let a = with_singular_values(&mut rng, 5, 4, &[4.0, 3.0, 2.0, 1.0]);
        let loss = LossSpec::random(5, 4, 8);
        let report = grad_check(&a, &loss, &BackwardConfig::default(), 1e-5).unwrap();
        assert!(!report.degenerate);
        assert_eq!(report.probe_count, 20);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn wide_and_tall_well_separated() {
        for (m, n, seed) in [(4, 3, 9), (3, 5, 10), (6, 6, 11)] {
            let mut rng = seeded(seed);
            let spectrum: Vec<f64> = (0..m.min(n)).map(|i| 3.2 - 0.5 * i as f64).collect();
            let a = with_singular_values(&mut rng, m, n, &spectrum);
            let mut loss = LossSpec::random(m, n, seed + 100);
            loss.reconstruction = Some(ReconstructionTerm {
                k: 2,
                target: gaussian_matrix(&mut rng, m, n),
            });
            let report = grad_check(&a, &loss, &BackwardConfig::default(), 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "{m}x{n}: {report:?}");
        }
    }

    #[test]
    fn half_skew_convention_disagrees_with_finite_differences() {
        let mut rng = seeded(12);
        let a = with_singular_values(&mut rng, 5, 4, &[4.0, 3.0, 2.0, 1.0]);
        let loss = LossSpec::random(5, 4, 13);
        let cfg = BackwardConfig { skew: SkewConvention::Half, ..Default::default() };
        let report = grad_check(&a, &loss, &cfg, 1e-5).unwrap();
        assert!(report.max_rel_error > 1e-2, "{report:?}");
    }

    #[test]
    fn tied_spectrum_stays_finite() {
        let mut rng = seeded(14);
        let a = with_singular_values(&mut rng, 4, 4, &[2.0, 1.0, 1.0, 0.5]);
        let report = grad_check(&a, &LossSpec::random(4, 4, 15), &BackwardConfig::default(), 1e-5).unwrap();
        assert!(report.degenerate);
        assert!(report.all_finite);
    }

    #[test]
    fn certification_cases_have_the_promised_gaps() {
        for i in 0..100 {
            let (a, _) = certification_case(1, i);
            let f = svd_full(&a).unwrap();
            assert!((3..=8).contains(&a.rows()) && (3..=6).contains(&a.cols()));
            assert!(f.s.windows(2).all(|w| w[0] - w[1] > 0.1), "case {i}: {:?}", f.s);
            assert!(*f.s.last().unwrap() > 0.1);
        }
    }

    #[test]
    fn degenerate_cases_are_flagged_and_finite() {
        let r = certify(20, |i| degenerate_case(1, i), &BackwardConfig::default(), 1e-5).unwrap();
        assert_eq!(r.degenerate_cases, 20);
        assert!(r.all_finite);
        // Measured 0.94.
        assert!(r.max_gain < 10.0, "{r:?}");
    }

    #[test]
    fn zero_matrix_stays_finite() {
        let f = svd_full(&DenseMatrix::zeros(4, 3)).unwrap();
        let loss = LossSpec::random(4, 3, 16);
        let g = svd_backward(&f, &loss.upstream(&f), &BackwardConfig::default()).unwrap();
        assert!(g.is_finite());
    }

    proptest::proptest! {
        #[test]
        fn series_is_the_exact_reciprocal_minus_its_tail(
            big in 1e-3f64..10.0,
            rel_gap in 1e-7f64..0.5,
            k in 1u32..60,
        ) {
            let small = big * (1.0 - rel_gap);
            let closed = reciprocal_close(big, small, k);
            let exact = reciprocal_far(big, small);
            let tail = (small / big).powi(2 * k as i32);
            proptest::prop_assert!((closed - exact * (1.0 - tail)).abs() <= 1e-6 * closed);
        }
    }
}

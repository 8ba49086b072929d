//! Singular value decompositions: full thin SVD and the randomized low-rank
//! range finder.

use faer::Mat;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{gaussian_matrix, seeded};

/// Default number of power iterations for [`svd_lowrank`].
pub const DEFAULT_NITER: usize = 2;

/// Seed of the Gaussian test matrix used by [`svd_lowrank`].
pub const DEFAULT_LOWRANK_SEED: u64 = 0x5eed_0f_5bd;

/// Thin SVD factors `A ≈ U diag(s) Vᵀ`.
///
/// `u` is `m x q`, `s` has `q` nonnegative entries in descending order and
/// `vt` is `q x n`. Signs are normalized so that the largest-magnitude entry
/// of every column of `u` is positive; ties between equal singular values
/// have no ordering guarantee.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SvdFactors {
    /// Number of retained triplets.
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `V` as an `n x q` matrix.
    pub fn v(&self) -> DenseMatrix {
        self.vt.transpose()
    }

    /// `U diag(s) Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u.scale_columns(&self.s).mm(&self.vt)
    }

    /// The leading `k` triplets.
    pub fn truncated(&self, k: usize) -> SvdFactors {
        let k = k.min(self.rank());
        SvdFactors {
            u: self.u.leading_columns(k),
            s: self.s[..k].to_vec(),
            vt: self.vt.leading_rows(k),
        }
    }

    /// `‖UᵀU − I‖_F`.
    pub fn u_orthonormality_error(&self) -> f64 {
        self.u
            .t_matmul(&self.u)
            .distance(&DenseMatrix::identity(self.rank()))
    }

    /// `‖VᵀV − I‖_F` (equivalently for the rows of `vt`).
    pub fn v_orthonormality_error(&self) -> f64 {
        self.vt
            .matmul_t(&self.vt)
            .distance(&DenseMatrix::identity(self.rank()))
    }
}

fn normalize_signs(u: &mut DenseMatrix, vt: &mut DenseMatrix) {
    for j in 0..u.cols() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for r in 0..u.rows() {
            let v = u[(r, j)];
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            for r in 0..u.rows() {
                u[(r, j)] = -u[(r, j)];
            }
            for v in vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
}

fn sorted_factors(u: faer::MatRef<'_, f64>, s: faer::ColRef<'_, f64>, v: faer::MatRef<'_, f64>) -> SvdFactors {
    let q = s.nrows();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let mut u_sorted = DenseMatrix::from_fn(u.nrows(), q, |r, c| u[(r, order[c])]);
    let mut vt_sorted = DenseMatrix::from_fn(q, v.nrows(), |r, c| v[(c, order[r])]);
    let s_sorted = order.iter().map(|&i| s[i].max(0.0)).collect();
    normalize_signs(&mut u_sorted, &mut vt_sorted);
    SvdFactors {
        u: u_sorted,
        s: s_sorted,
        vt: vt_sorted,
    }
}

/// Full thin SVD with `q = min(rows, cols)`.
pub fn svd_full(a: &DenseMatrix) -> Result<SvdFactors> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd_full input"));
    }
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(SvdFactors {
            u: DenseMatrix::zeros(m, 0),
            s: Vec::new(),
            vt: DenseMatrix::zeros(0, n),
        });
    }
    let svd = a.to_faer().thin_svd().map_err(|_| Error::SvdFailed { rows: m, cols: n })?;
    let f = sorted_factors(svd.U(), svd.S().column_vector(), svd.V());
    if !f.u.is_finite() || !f.vt.is_finite() || f.s.iter().any(|v| !v.is_finite()) {
        return Err(Error::SvdFailed { rows: m, cols: n });
    }
    Ok(f)
}

fn orthonormalize(m: &Mat<f64>) -> Mat<f64> {
    m.qr().compute_thin_Q()
}

/// Randomized rank-`q` SVD: Gaussian sketch, `niter` rounds of power
/// iteration with re-orthonormalization, then an exact SVD of the small
/// projected matrix. Uses [`DEFAULT_LOWRANK_SEED`].
pub fn svd_lowrank(a: &DenseMatrix, q: usize, niter: usize) -> Result<SvdFactors> {
    svd_lowrank_seeded(a, q, niter, DEFAULT_LOWRANK_SEED)
}

/// [`svd_lowrank`] with an explicit sketch seed.
///
/// The sketch width is `min(q + 10, min(m, n))`; the top `q` triplets of the
/// sketched decomposition are returned.
pub fn svd_lowrank_seeded(a: &DenseMatrix, q: usize, niter: usize, seed: u64) -> Result<SvdFactors> {
    let (m, n) = a.shape();
    let full = m.min(n);
    if q == 0 || q > full {
        return Err(Error::InvalidArgument(format!(
            "svd_lowrank rank {q} outside 1..={full}"
        )));
    }
    if niter == 0 {
        return Err(Error::InvalidArgument("svd_lowrank needs niter >= 1".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd_lowrank input"));
    }
    let width = (q + 10).min(full);
    let mut rng = seeded(seed);
    let omega = gaussian_matrix(&mut rng, n, width).to_faer();
    let a_f = a.to_faer();
    let mut basis = orthonormalize(&(&a_f * &omega));
    for _ in 0..niter {
        let z = orthonormalize(&(a_f.transpose() * &basis));
        basis = orthonormalize(&(&a_f * &z));
    }
    let projected = DenseMatrix::from_faer((basis.transpose() * &a_f).as_ref());
    let small = svd_full(&projected)?;
    let u = DenseMatrix::from_faer(basis.as_ref()).mm(&small.u);
    let mut out = SvdFactors { u, s: small.s, vt: small.vt }.truncated(q);
    normalize_signs(&mut out.u, &mut out.vt);
    Ok(out)
}

/// Best rank-`k` approximation `U_k Σ_k V_kᵀ`.
pub fn eckart_young(a: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    Ok(svd_full(a)?.truncated(k).reconstruct())
}

/// Number of singular values above `rel_tol · σ_1`.
pub fn numerical_rank(a: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    let s = svd_full(a)?.s;
    let Some(&top) = s.first() else { return Ok(0) };
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * top).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded, with_singular_values};

    /// One-sided Jacobi singular values, written independently of the
    /// library path used by `svd_full`.
    fn jacobi_singular_values(a: &DenseMatrix) -> Vec<f64> {
        let a = if a.rows() < a.cols() { a.transpose() } else { a.clone() };
        let (m, n) = a.shape();
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
        for _sweep in 0..100 {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                    let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                    let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..m {
                        let (x, y) = (cols[p][i], cols[q][i]);
                        cols[p][i] = c * x - s * y;
                        cols[q][i] = s * x + c * y;
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut s: Vec<f64> = cols
            .iter()
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    #[test]
    fn identity_spectrum() {
        let f = svd_full(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(f.s.len(), 3);
        for s in &f.s {
            assert!((s - 1.0).abs() < 1e-14);
        }
        let p = f.u.mm(&f.vt);
        assert!(p.distance(&DenseMatrix::identity(3)) < 1e-12);
    }

    #[test]
    fn diagonal_spectrum() {
        let f = svd_full(&DenseMatrix::diag(&[1.0, -3.0, 2.0])).unwrap();
        for (got, want) in f.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn random_reconstruction_and_reference_spectrum() {
        let mut rng = seeded(11);
        for (m, n) in [(5, 4), (4, 5), (8, 6), (3, 3)] {
            let a = gaussian_matrix(&mut rng, m, n);
            let f = svd_full(&a).unwrap();
            assert!(f.reconstruct().distance(&a) / a.frobenius_norm() < 1e-10);
            assert!(f.u_orthonormality_error() < 1e-6);
            assert!(f.v_orthonormality_error() < 1e-6);
            assert!(f.s.windows(2).all(|w| w[0] >= w[1]));
            let reference = jacobi_singular_values(&a);
            for (x, y) in f.s.iter().zip(&reference) {
                assert!((x - y).abs() < 1e-10 * reference[0], "{x} vs {y}");
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut a = DenseMatrix::zeros(2, 2);
        a[(0, 1)] = f64::INFINITY;
        assert!(matches!(svd_full(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rank_one_product_has_rank_one() {
        let mut rng = seeded(12);
        let a = gaussian_matrix(&mut rng, 4, 1).mm(&gaussian_matrix(&mut rng, 1, 3));
        let b = gaussian_matrix(&mut rng, 3, 1).mm(&gaussian_matrix(&mut rng, 1, 5));
        let s = svd_full(&a.mm(&b)).unwrap().s;
        assert!(s[1] / s[0] < 1e-10);
    }

    #[test]
    fn lowrank_full_request_matches_full() {
        let mut rng = seeded(13);
        let a = gaussian_matrix(&mut rng, 6, 4);
        let lr = svd_lowrank(&a, 4, DEFAULT_NITER).unwrap();
        let full = svd_full(&a).unwrap();
        for (x, y) in lr.s.iter().zip(&full.s) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn lowrank_recovers_exact_rank_two() {
        let mut rng = seeded(14);
        let a = gaussian_matrix(&mut rng, 7, 2).mm(&gaussian_matrix(&mut rng, 2, 5));
        let lr = svd_lowrank(&a, 2, DEFAULT_NITER).unwrap();
        assert!(lr.reconstruct().distance(&a) < 1e-8);
    }

    #[test]
    fn lowrank_leading_values_on_gapped_spectrum() {
        let mut rng = seeded(15);
        let spectrum: Vec<f64> = (0..48)
            .map(|i| if i < 8 { 10.0 - i as f64 * 0.5 } else { 2.0 * 0.9f64.powi(i - 8) })
            .collect();
        let a = with_singular_values(&mut rng, 64, 48, &spectrum);
        let lr = svd_lowrank(&a, 8, 2).unwrap();
        let full = svd_full(&a).unwrap();
        for i in 0..8 {
            assert!((lr.s[i] - full.s[i]).abs() / full.s[i] < 1e-3);
        }
    }

    #[test]
    fn lowrank_on_plain_gaussian() {
        let mut rng = seeded(16);
        let a = gaussian_matrix(&mut rng, 64, 48);
        let full = svd_full(&a).unwrap();
        let lr = svd_lowrank(&a, 8, 2).unwrap();
        // No designed gap here, so only the top value is held to 1e-3.
        assert!((lr.s[0] - full.s[0]).abs() / full.s[0] < 1e-3);
    }

    #[test]
    fn lowrank_rejects_bad_rank() {
        let a = DenseMatrix::identity(3);
        assert!(svd_lowrank(&a, 0, 2).is_err());
        assert!(svd_lowrank(&a, 4, 2).is_err());
        assert!(svd_lowrank(&a, 2, 0).is_err());
    }

    #[test]
    fn numerical_rank_of_outer_product() {
        let mut rng = seeded(17);
        let a = gaussian_matrix(&mut rng, 5, 2).mm(&gaussian_matrix(&mut rng, 2, 5));
        assert_eq!(numerical_rank(&a, 1e-10).unwrap(), 2);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(200))]

        #[test]
        fn rank_deficient_inputs_reconstruct(m in 1usize..14, n in 1usize..14, r in 0usize..6, seed in 0u64..10_000) {
            let mut rng = seeded(seed);
            let r = r.min(m.min(n));
            let a = gaussian_matrix(&mut rng, m, r).mm(&gaussian_matrix(&mut rng, r, n));
            let f = svd_full(&a).unwrap();
            let scale = a.frobenius_norm().max(1.0);
            proptest::prop_assert!(f.reconstruct().distance(&a) / scale < 1e-10);
            proptest::prop_assert!(f.u_orthonormality_error() < 1e-6);
            proptest::prop_assert!(f.v_orthonormality_error() < 1e-6);
        }
    }
}

//! Seeded random sources.
//!
//! Every random draw in the crate goes through [`seeded`], which returns a
//! `Pcg64` generator (PCG XSL-RR 128/64, multiplier
//! `0x2360_ED05_1FC6_5DA4_4385_DF64_9FCC_F645`, increment
//! `0x5851_F42D_4C95_7F2D_1405_7B7E_F767_814F`) seeded through
//! `SeedableRng::seed_from_u64`. The stream is platform independent, so
//! datasets and initial models regenerate bit for bit.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

use crate::matrix::DenseMatrix;

pub type SeededRng = Pcg64;

pub fn seeded(seed: u64) -> SeededRng {
    Pcg64::seed_from_u64(seed)
}

/// Matrix of independent standard normal entries, filled row by row.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseMatrix::from_vec_unchecked(rows, cols, data)
}

/// Matrix with orthonormal columns (`rows >= cols`), drawn from the QR factor
/// of a Gaussian matrix with the sign of R's diagonal folded in.
pub fn orthonormal_columns(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
    assert!(rows >= cols, "orthonormal_columns needs rows >= cols");
    let g = gaussian_matrix(rng, rows, cols).to_faer();
    let qr = g.qr();
    let q = DenseMatrix::from_faer(qr.compute_thin_Q().as_ref());
    let r = qr.thin_R();
    let signs: Vec<f64> = (0..cols).map(|j| if r[(j, j)] < 0.0 { -1.0 } else { 1.0 }).collect();
    q.scale_columns(&signs)
}

/// `rows x cols` matrix `U diag(singular) Vᵀ` with random orthonormal factors.
/// `singular.len()` must not exceed `min(rows, cols)`.
pub fn with_singular_values(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    singular: &[f64],
) -> DenseMatrix {
    let q = singular.len();
    assert!(q <= rows.min(cols));
    let u = orthonormal_columns(rng, rows, q);
    let v = orthonormal_columns(rng, cols, q);
    u.scale_columns(singular).matmul_t(&v)
}

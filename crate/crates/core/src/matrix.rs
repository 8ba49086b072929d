//! Row-major dense real matrices.

use std::fmt;
use std::ops::{Index, IndexMut};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of `f64`.
///
/// Zero-sized dimensions are allowed so that rank-0 factors (`n x 0`) can be
/// represented without special cases.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            let row = self.row(r);
            let shown: Vec<String> = row.iter().take(8).map(|v| format!("{v:+.6e}")).collect();
            writeln!(f, "  {}{}", shown.join(" "), if self.cols > 8 { " ..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Square diagonal matrix.
    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("DenseMatrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(self.mm(other))
    }

    /// Unchecked product for internal call sites whose shapes are fixed by
    /// construction.
    pub(crate) fn mm(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "mm: inner dimensions differ");
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let dst = &mut out[r * n..(r + 1) * n];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Self::from_vec_unchecked(self.rows, n, out)
    }

    /// `self · otherᵀ`.
    pub(crate) fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_t: inner dimensions differ");
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for s in 0..other.rows {
                out.push(a.iter().zip(other.row(s)).map(|(x, y)| x * y).sum());
            }
        }
        Self::from_vec_unchecked(self.rows, other.rows, out)
    }

    /// `selfᵀ · other`.
    pub(crate) fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "t_matmul: inner dimensions differ");
        let n = other.cols;
        let mut out = vec![0.0; self.cols * n];
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *d += a * bv;
                }
            }
        }
        Self::from_vec_unchecked(self.cols, n, out)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Multiplies column `j` by `factors[j]` (right multiplication by a diagonal).
    pub fn scale_columns(&self, factors: &[f64]) -> Self {
        assert_eq!(factors.len(), self.cols);
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, f) in out.row_mut(r).iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out
    }

    /// Multiplies row `i` by `factors[i]` (left multiplication by a diagonal).
    pub fn scale_rows(&self, factors: &[f64]) -> Self {
        assert_eq!(factors.len(), self.rows);
        let mut out = self.clone();
        for (r, f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        out
    }

    /// The leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        assert!(k <= self.cols);
        Self::from_fn(self.rows, k, |r, c| self[(r, c)])
    }

    /// The leading `k` rows.
    pub fn leading_rows(&self, k: usize) -> Self {
        assert!(k <= self.rows);
        Self::from_vec_unchecked(k, self.cols, self.data[..k * self.cols].to_vec())
    }

    /// Rows `start..end`.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self::from_vec_unchecked(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "hcat",
                format!("{} rows vs {} rows", self.rows, other.rows),
            ));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Self::from_vec_unchecked(self.rows, cols, data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖self − other‖_F`; panics on shape mismatch.
    pub fn distance(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Frobenius inner product `Σ a_ij b_ij`.
    pub fn inner(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Rounds every entry to the nearest `f32` (storage precision).
    pub fn round_to_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub(crate) fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |r, c| self.data[r * self.cols + c])
    }

    pub(crate) fn from_faer(m: faer::MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, seeded};

    fn naive_product(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = acc;
            }
        }
        out
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn matmul_by_identity() {
        let mut rng = seeded(1);
        let a = gaussian_matrix(&mut rng, 3, 4);
        assert_eq!(a.matmul(&DenseMatrix::identity(4)).unwrap(), a);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = seeded(2);
        let a = gaussian_matrix(&mut rng, 3, 4);
        let b = gaussian_matrix(&mut rng, 4, 2);
        // Same summation order as the naive loop, so equality is exact.
        assert_eq!(a.matmul(&b).unwrap(), naive_product(&a, &b));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = seeded(3);
        let a = gaussian_matrix(&mut rng, 5, 3);
        let b = gaussian_matrix(&mut rng, 4, 3);
        let c = gaussian_matrix(&mut rng, 5, 2);
        assert!(a.matmul_t(&b).distance(&a.mm(&b.transpose())) < 1e-14);
        assert!(a.t_matmul(&c).distance(&a.transpose().mm(&c)) < 1e-14);
    }

    #[test]
    fn associativity_to_roundoff() {
        let mut rng = seeded(4);
        let a = gaussian_matrix(&mut rng, 4, 5);
        let b = gaussian_matrix(&mut rng, 5, 6);
        let c = gaussian_matrix(&mut rng, 6, 3);
        let left = a.mm(&b).mm(&c);
        let right = a.mm(&b.mm(&c));
        assert!(left.distance(&right) < 1e-12 * left.frobenius_norm());
    }

    #[test]
    fn hcat_and_slices() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.hcat(&b).unwrap();
        assert_eq!(c.row(1), &[3.0, 4.0, 6.0]);
        assert_eq!(c.leading_columns(1).column(0), vec![1.0, 3.0]);
        assert_eq!(c.leading_rows(1).row(0), &[1.0, 2.0, 5.0]);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let a = DenseMatrix::from_fn(2, 3, |r, c| r as f64 * 0.1 - c as f64 / 3.0);
        let text = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<DenseMatrix>(&text).unwrap(), a);
        assert!(serde_json::from_str::<DenseMatrix>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }
}

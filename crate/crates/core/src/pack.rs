//! Mixed-precision storage of rank-`k` factors in `k·max(m, n)` 16-bit cells.
//!
//! For an `m x n` weight with factors `Ũ = (UΣ)[:, :k]` (`m x k`) and
//! `V[:, :k]` (`n x k`), the first `min(m, n)` rows of the cell array pair an
//! 8-bit code of `Ũ` (high byte) with an 8-bit code of `V` (low byte). The
//! remaining `max(m, n) − min(m, n)` rows hold the taller factor as raw
//! IEEE half floats. Codes are symmetric per-column absmax int8.

use half::f16;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::svd::svd_full;
use crate::update::UpdatedWeight;

/// Largest code magnitude; −128 is never produced.
pub const CODE_MAX: i8 = 127;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantBlock {
    pub codes: Vec<i8>,
    pub scale: f32,
}

impl QuantBlock {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| dequantize_code(c, self.scale)).collect()
    }
}

fn dequantize_code(code: i8, scale: f32) -> f64 {
    code as f64 * scale as f64
}

fn scale_for(values: impl Iterator<Item = f64>) -> f32 {
    let absmax = values.fold(0.0f64, |acc, v| acc.max(v.abs()));
    (absmax / CODE_MAX as f64) as f32
}

fn code_for(v: f64, scale: f32) -> i8 {
    if scale == 0.0 {
        return 0;
    }
    (v / scale as f64).round().clamp(-(CODE_MAX as f64), CODE_MAX as f64) as i8
}

/// Symmetric absmax quantization: `scale = max|v|/127`, `code = round(v/scale)`.
///
/// The scale is rounded to `f32` before the codes are computed, so
/// quantizing a dequantized block reproduces it exactly.
pub fn quantize_block(v: &[f64]) -> QuantBlock {
    let scale = scale_for(v.iter().copied());
    QuantBlock {
        codes: v.iter().map(|&x| code_for(x, scale)).collect(),
        scale,
    }
}

/// Which factor occupies the raw tail rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `m ≥ n`: tail rows hold `Ũ`.
    TallU = 0,
    /// `m < n`: tail rows hold `V`.
    TallV = 1,
}

impl Layout {
    pub fn for_shape(m: usize, n: usize) -> Self {
        if m >= n {
            Layout::TallU
        } else {
            Layout::TallV
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Layout::TallU),
            1 => Some(Layout::TallV),
            _ => None,
        }
    }
}

/// Rank-`k` factors packed into `k·max(m, n)` cells, stored row-major as a
/// `max(m, n) x k` array.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedWeight {
    m: usize,
    n: usize,
    k: usize,
    layout: Layout,
    u_scales: Vec<f32>,
    v_scales: Vec<f32>,
    slots: Vec<u16>,
}

/// Factored weight `w1 · w2` with `w1: m x k`, `w2: k x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
}

impl LayerFactors {
    pub fn product(&self) -> DenseMatrix {
        self.w1.mm(&self.w2)
    }
}

fn pair_cell(u_code: i8, v_code: i8) -> u16 {
    ((u_code as u8 as u16) << 8) | v_code as u8 as u16
}

fn split_cell(cell: u16) -> (i8, i8) {
    ((cell >> 8) as u8 as i8, cell as u8 as i8)
}

impl PackedWeight {
    /// Validates raw parts as read from storage.
    pub fn from_parts(
        m: usize,
        n: usize,
        k: usize,
        layout_tag: u8,
        u_scales: Vec<f32>,
        v_scales: Vec<f32>,
        slots: Vec<u16>,
    ) -> Result<Self> {
        let layout = Layout::from_tag(layout_tag)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layout tag {layout_tag}")))?;
        if layout != Layout::for_shape(m, n) {
            return Err(Error::InvalidArgument(format!(
                "layout tag {layout_tag} does not match a {m}x{n} weight"
            )));
        }
        if k > m.min(n) {
            return Err(Error::InvalidArgument(format!("rank {k} exceeds min({m}, {n})")));
        }
        if slots.len() != k * m.max(n) {
            return Err(Error::InvalidArgument(format!(
                "{} slots for k = {k}, max(m, n) = {}",
                slots.len(),
                m.max(n)
            )));
        }
        if u_scales.len() != k || v_scales.len() != k {
            return Err(Error::InvalidArgument("scale table length differs from rank".into()));
        }
        if u_scales.iter().chain(&v_scales).any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidArgument("scales must be finite and nonnegative".into()));
        }
        Ok(Self { m, n, k, layout, u_scales, v_scales, slots })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn u_scales(&self) -> &[f32] {
        &self.u_scales
    }

    pub fn v_scales(&self) -> &[f32] {
        &self.v_scales
    }

    pub fn slots(&self) -> &[u16] {
        &self.slots
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Bytes spent on scale tables, outside the slot budget.
    pub fn scale_overhead_bytes(&self) -> usize {
        4 * (self.u_scales.len() + self.v_scales.len())
    }
}

/// Packs a rank-`k` weight: SVD of `w̃`, `Ũ = (UΣ)[:, :k]`, `V[:, :k]`.
pub fn pack(w: &UpdatedWeight) -> Result<PackedWeight> {
    let (m, n) = w.w_tilde.shape();
    if w.k > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {} exceeds min({m}, {n})", w.k)));
    }
    let f = svd_full(&w.w_tilde)?.truncated(w.k);
    let w1 = f.u.scale_columns(&f.s);
    // A direction with σ = 0 contributes nothing; store it as zeros on both
    // sides instead of an arbitrary unit vector.
    let live: Vec<f64> = f.s.iter().map(|&s| if s == 0.0 { 0.0 } else { 1.0 }).collect();
    pack_factors(&w1, &f.vt.scale_rows(&live))
}

/// Packs explicit factors `w1: m x k` and `w2: k x n` (`w2 = Vᵀ`).
pub fn pack_factors(w1: &DenseMatrix, w2: &DenseMatrix) -> Result<PackedWeight> {
    let (m, k) = w1.shape();
    let n = w2.cols();
    if w2.rows() != k {
        return Err(Error::shape("pack_factors", format!("{m}x{k} times {}x{n}", w2.rows())));
    }
    if k > m.min(n) {
        return Err(Error::InvalidArgument(format!("rank {k} exceeds min({m}, {n})")));
    }
    if !w1.is_finite() || !w2.is_finite() {
        return Err(Error::NonFinite("pack_factors"));
    }
    let v = w2.transpose();
    let short = m.min(n);
    let layout = Layout::for_shape(m, n);
    let u_scales: Vec<f32> = (0..k).map(|c| scale_for((0..short).map(|r| w1[(r, c)]))).collect();
    let v_scales: Vec<f32> = (0..k).map(|c| scale_for((0..short).map(|r| v[(r, c)]))).collect();
    let tall = match layout {
        Layout::TallU => w1,
        Layout::TallV => &v,
    };
    let mut slots = Vec::with_capacity(k * m.max(n));
    for r in 0..m.max(n) {
        for c in 0..k {
            let cell = if r < short {
                pair_cell(code_for(w1[(r, c)], u_scales[c]), code_for(v[(r, c)], v_scales[c]))
            } else {
                f16::from_f64(tall[(r, c)]).to_bits()
            };
            slots.push(cell);
        }
    }
    Ok(PackedWeight { m, n, k, layout, u_scales, v_scales, slots })
}

/// Expands the cells back into `(w1, w2)` with `w1: m x k`, `w2: k x n`.
pub fn unpack(p: &PackedWeight) -> LayerFactors {
    let (m, n, k) = (p.m, p.n, p.k);
    let short = m.min(n);
    let mut w1 = DenseMatrix::zeros(m, k);
    let mut v = DenseMatrix::zeros(n, k);
    for r in 0..m.max(n) {
        for c in 0..k {
            let cell = p.slots[r * k + c];
            if r < short {
                let (uc, vc) = split_cell(cell);
                w1[(r, c)] = dequantize_code(uc, p.u_scales[c]);
                v[(r, c)] = dequantize_code(vc, p.v_scales[c]);
            } else {
                let raw = f16::from_bits(cell).to_f64();
                match p.layout {
                    Layout::TallU => w1[(r, c)] = raw,
                    Layout::TallV => v[(r, c)] = raw,
                }
            }
        }
    }
    LayerFactors { w1, w2: v.transpose() }
}

/// `k·max(m, n) / (mn)`.
pub fn packed_ratio(p: &PackedWeight) -> f64 {
    (p.k * p.m.max(p.n)) as f64 / (p.m * p.n) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantErrorReport {
    pub mse: f64,
    pub mae: f64,
    pub relative_frobenius: f64,
}

/// Error between `w̃` and the product of its packed-then-unpacked factors.
pub fn quant_error_report(w: &UpdatedWeight) -> Result<QuantErrorReport> {
    let recon = unpack(&pack(w)?).product();
    let count = (w.w_tilde.rows() * w.w_tilde.cols()).max(1) as f64;
    let diff = recon.sub(&w.w_tilde)?;
    let norm = w.w_tilde.frobenius_norm();
    Ok(QuantErrorReport {
        mse: diff.data().iter().map(|d| d * d).sum::<f64>() / count,
        mae: diff.data().iter().map(|d| d.abs()).sum::<f64>() / count,
        relative_frobenius: if norm > 0.0 { diff.frobenius_norm() / norm } else { 0.0 },
    })
}

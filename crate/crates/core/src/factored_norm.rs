//! Row-wise norm of `W + s·B·A` without forming `B·A`.
//!
//! The squared row norm splits into three per-row terms:
//!
//! ```text
//! ‖W + sBA‖²_row = ‖W‖²_row + 2s·⟨W, BA⟩_row + s²·‖BA‖²_row
//! ⟨W, BA⟩_j     = Σ_l B[j,l] · U[j,l],      U = W·Aᵀ   [d_out, r]
//! ‖BA‖²_j       = Σ_l (B·G)[j,l] · B[j,l],  G = A·Aᵀ   [r, r]
//! ```
//!
//! `W` and `A` are consumed in column chunks of the input dimension so that
//! the only `d_in`-sized buffer is one fp32 chunk. `U` and `G` are running
//! sums updated chunk by chunk, each element continuing its own ascending
//! sum, which makes the result bitwise independent of the chunk size. All accumulation is fp32 (fp64 when
//! the weight itself is fp64, which is only used by oracles). The result is a
//! plain value: nothing about it participates in gradients, and nothing is
//! cached between calls.

use crate::error::{DoraError, Result};
use crate::linalg::{gemm_nn, gemm_nt_into, ChunkPlan, RealMatrix, RealVector};
use crate::numerics::{correctly_rounded_sqrt_f32, nan_preserving_clamp_min, DType};
use num_traits::Float;

/// Low-rank factors `A [r, d_in]`, `B [d_out, r]` and the scale `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: RealMatrix,
    pub b: RealMatrix,
    pub scale: f64,
}

impl AdapterPair {
    pub fn new(a: RealMatrix, b: RealMatrix, scale: f64) -> Result<Self> {
        if a.rows() == 0 || a.rows() != b.cols() {
            return Err(DoraError::shape(
                "AdapterPair::new",
                format!("A rows == B cols >= 1 (A {:?})", a.shape()),
                format!("B {:?}", b.shape()),
            ));
        }
        Ok(Self { a, b, scale })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Check the factors against a `[d_out, d_in]` weight.
    pub fn check_weight(&self, op: &'static str, w: &RealMatrix) -> Result<()> {
        if self.a.cols() != w.cols() || self.b.rows() != w.rows() {
            return Err(DoraError::shape(
                op,
                format!("A [r, {}], B [{}, r]", w.cols(), w.rows()),
                format!("A {:?}, B {:?}", self.a.shape(), self.b.shape()),
            ));
        }
        Ok(())
    }
}

/// Learnable per-output-row magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitude(RealVector);

impl Magnitude {
    pub fn new(values: RealVector) -> Result<Self> {
        if let Some(bad) = values.data.iter().find(|v| !v.is_finite()) {
            return Err(DoraError::InvalidConfig(format!("magnitude entry {bad} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &RealVector {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The three fp32 per-row terms plus the fp64-precomputed scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct NormTerms {
    pub base_sq: Vec<f32>,
    pub cross: Vec<f32>,
    pub ba_sq: Vec<f32>,
    pub two_s: f64,
    pub s2: f64,
}

impl NormTerms {
    pub fn with_scale(base_sq: Vec<f32>, cross: Vec<f32>, ba_sq: Vec<f32>, scale: f64) -> Self {
        Self {
            base_sq,
            cross,
            ba_sq,
            two_s: 2.0 * scale,
            s2: scale * scale,
        }
    }
}

struct Accumulated<T> {
    base_sq: Vec<T>,
    cross: Vec<T>,
    ba_sq: Vec<T>,
}

fn check_plan(w: &RealMatrix, plan: &ChunkPlan) -> Result<()> {
    if plan.d_out != w.rows() || plan.d_in != w.cols() {
        return Err(DoraError::shape(
            "factored_row_norm",
            format!("plan for {:?}", w.shape()),
            format!("plan for ({}, {})", plan.d_out, plan.d_in),
        ));
    }
    Ok(())
}

fn accumulate<T: Float + Send + Sync>(w: &RealMatrix, adapter: &AdapterPair, plan: &ChunkPlan) -> Accumulated<T> {
    let d_out = w.rows();
    let r = adapter.rank();
    let low_rank = adapter.scale != 0.0;

    let mut base_sq = vec![T::zero(); d_out];
    let mut cross = vec![T::zero(); d_out];
    let mut ba_sq = vec![T::zero(); d_out];
    let b: Vec<T> = if low_rank { adapter.b.column_block(0..r) } else { Vec::new() };
    let mut gram = if low_rank { vec![T::zero(); r * r] } else { Vec::new() };

    // Every accumulator carries its running sum from one chunk into the next,
    // so the additions performed do not depend on where the seams fall.
    let mut u = if low_rank { vec![T::zero(); d_out * r] } else { Vec::new() };
    for range in plan.ranges() {
        let cs = range.len();
        let w_c: Vec<T> = w.column_block(range.clone());
        for (acc, row) in base_sq.iter_mut().zip(w_c.chunks_exact(cs)) {
            *acc = row.iter().fold(*acc, |s, &v| s + v * v);
        }
        if !low_rank {
            continue;
        }
        let a_c: Vec<T> = adapter.a.column_block(range);
        gemm_nt_into(&a_c, &a_c, r, cs, r, &mut gram);
        gemm_nt_into(&w_c, &a_c, d_out, cs, r, &mut u);
    }

    if low_rank {
        for ((acc, b_row), u_row) in cross.iter_mut().zip(b.chunks_exact(r)).zip(u.chunks_exact(r)) {
            *acc = b_row.iter().zip(u_row).fold(T::zero(), |s, (&bv, &uv)| s + bv * uv);
        }
        let bg = gemm_nn(&b, &gram, d_out, r, r);
        for ((out, bg_row), b_row) in ba_sq.iter_mut().zip(bg.chunks_exact(r)).zip(b.chunks_exact(r)) {
            *out = bg_row.iter().zip(b_row).fold(T::zero(), |s, (&x, &y)| s + x * y);
        }
    }
    Accumulated { base_sq, cross, ba_sq }
}

/// fp32 accumulation of the three norm terms.
///
/// When `s = 0` the cross and Gram terms are never formed; `cross` and
/// `ba_sq` come back as zeros.
pub fn factored_norm_terms(w: &RealMatrix, adapter: &AdapterPair, plan: &ChunkPlan) -> Result<NormTerms> {
    adapter.check_weight("factored_norm_terms", w)?;
    check_plan(w, plan)?;
    let acc = accumulate::<f32>(w, adapter, plan);
    Ok(NormTerms::with_scale(acc.base_sq, acc.cross, acc.ba_sq, adapter.scale))
}

/// Per-row L2 norm of `W + s·B·A`, returned in `W`'s dtype.
pub fn factored_row_norm(w: &RealMatrix, adapter: &AdapterPair, plan: &ChunkPlan) -> Result<RealVector> {
    adapter.check_weight("factored_row_norm", w)?;
    check_plan(w, plan)?;

    if w.dtype() == DType::Fp64 {
        let acc = accumulate::<f64>(w, adapter, plan);
        let s = adapter.scale;
        let out = (0..w.rows())
            .map(|j| {
                let sq = if s == 0.0 {
                    acc.base_sq[j]
                } else {
                    acc.base_sq[j] + 2.0 * s * acc.cross[j] + s * s * acc.ba_sq[j]
                };
                if sq.is_nan() {
                    f64::NAN
                } else {
                    sq.max(0.0).sqrt()
                }
            })
            .collect();
        return Ok(RealVector { dtype: DType::Fp64, data: out });
    }

    let acc = accumulate::<f32>(w, adapter, plan);
    let norm: Vec<f32> = if adapter.scale == 0.0 {
        acc.base_sq.iter().map(|&b| correctly_rounded_sqrt_f32(b)).collect()
    } else {
        assemble_norm(&NormTerms::with_scale(acc.base_sq, acc.cross, acc.ba_sq, adapter.scale))
    };
    Ok(RealVector::new(w.dtype(), norm.into_iter().map(f64::from).collect()))
}

/// `sqrt(max(base_sq + two_s·cross + s2·ba_sq, 0))` with every product and sum
/// individually rounded to fp32, in that order.
///
/// The fp64 scalars enter as fp32 operands, matching a scalar-times-tensor op
/// in an fp32 context. Rust never contracts `a * b + c` into an FMA, so each
/// `let` below is one rounded fp32 operation. NaN anywhere in a row yields
/// NaN for that row.
pub fn assemble_norm(terms: &NormTerms) -> Vec<f32> {
    let two_s = terms.two_s as f32;
    let s2 = terms.s2 as f32;
    terms
        .base_sq
        .iter()
        .zip(&terms.cross)
        .zip(&terms.ba_sq)
        .map(|((&base, &cross), &ba)| {
            let scaled_cross = two_s * cross;
            let t1 = base + scaled_cross;
            let scaled_ba = s2 * ba;
            let t2 = t1 + scaled_ba;
            correctly_rounded_sqrt_f32(nan_preserving_clamp_min(t2, 0.0))
        })
        .collect()
}

/// `g = m / max(w_norm, eps)` in `dtype`, one correctly rounded division per
/// element. Kept apart from the norm so every norm path shares this precision.
pub fn magnitude_scale(m: &Magnitude, w_norm: &RealVector, dtype: DType) -> Result<RealVector> {
    if m.len() != w_norm.len() {
        return Err(DoraError::shape(
            "magnitude_scale",
            format!("w_norm of length {}", m.len()),
            format!("length {}", w_norm.len()),
        ));
    }
    let eps = dtype.round(dtype.norm_eps());
    let g = m
        .values()
        .data
        .iter()
        .zip(&w_norm.data)
        .map(|(&mv, &wn)| {
            let wn = dtype.round(wn);
            let denom = if wn.is_nan() { wn } else { wn.max(eps) };
            dtype.div(dtype.round(mv), denom)
        })
        .collect();
    Ok(RealVector { dtype, data: g })
}

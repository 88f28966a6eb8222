//! Dense fp64 reference paths.
//!
//! These materialize `B·A` (and optionally a `[d_in, d_in]` identity) the way
//! a straightforward implementation would. They are ground truth for tests,
//! not competitors: every computation is fp64 whatever the input dtype, and
//! `d_in` is capped so a stray call cannot allocate gigabytes.

use crate::error::{DoraError, Result};
use crate::factored_norm::{AdapterPair, Magnitude};
use crate::linalg::{matmul_f64, matmul_f64_nt, RealMatrix, RealVector};
use crate::memory_model::{dense_baseline_bytes, MemoryEstimate};
use crate::numerics::DType;

pub const DEFAULT_ORACLE_D_IN_CAP: usize = 16384;

/// Relative central-difference step for [`finite_difference_grads`].
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Row norms from a dense path plus the allocations that path implies.
#[derive(Debug, Clone)]
pub struct OracleNorm {
    pub w_norm: RealVector,
    pub ledger: MemoryEstimate,
}

fn check_cap(op: &'static str, d_in: usize, cap: usize) -> Result<()> {
    if d_in > cap {
        return Err(DoraError::OracleCapExceeded { op, d_in, cap });
    }
    Ok(())
}

fn as_f64(m: &RealMatrix) -> RealMatrix {
    m.cast(DType::Fp64)
}

/// `W + s·BA` in fp64 given a dense `BA`.
fn add_scaled(w: &RealMatrix, ba: &RealMatrix, s: f64) -> RealMatrix {
    RealMatrix::from_fn(w.rows(), w.cols(), DType::Fp64, |i, j| w.get(i, j) + s * ba.get(i, j))
}

fn row_norms_f64(v: &RealMatrix) -> Vec<f64> {
    (0..v.rows())
        .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

fn dense_ba(adapter: &AdapterPair) -> Result<RealMatrix> {
    matmul_f64(&as_f64(&adapter.b), &as_f64(&adapter.a))
}

/// Row norms via `B·(A·I)` with an explicit identity.
pub fn peft_identity_norm(w: &RealMatrix, adapter: &AdapterPair) -> Result<OracleNorm> {
    peft_identity_norm_with_cap(w, adapter, DEFAULT_ORACLE_D_IN_CAP)
}

pub fn peft_identity_norm_with_cap(w: &RealMatrix, adapter: &AdapterPair, cap: usize) -> Result<OracleNorm> {
    adapter.check_weight("peft_identity_norm", w)?;
    check_cap("peft_identity_norm", w.cols(), cap)?;
    let eye = RealMatrix::identity(w.cols(), DType::Fp64);
    let a_eye = matmul_f64(&as_f64(&adapter.a), &eye)?;
    let ba = matmul_f64(&as_f64(&adapter.b), &a_eye)?;
    let norms = row_norms_f64(&add_scaled(w, &ba, adapter.scale));
    Ok(OracleNorm {
        w_norm: RealVector::new(w.dtype(), norms),
        ledger: dense_baseline_bytes(w.rows(), w.cols(), w.dtype(), true),
    })
}

/// Row norms via a directly formed dense `B·A`.
pub fn dense_ba_norm(w: &RealMatrix, adapter: &AdapterPair) -> Result<OracleNorm> {
    dense_ba_norm_with_cap(w, adapter, DEFAULT_ORACLE_D_IN_CAP)
}

pub fn dense_ba_norm_with_cap(w: &RealMatrix, adapter: &AdapterPair, cap: usize) -> Result<OracleNorm> {
    adapter.check_weight("dense_ba_norm", w)?;
    check_cap("dense_ba_norm", w.cols(), cap)?;
    let norms = row_norms_f64(&add_scaled(w, &dense_ba(adapter)?, adapter.scale));
    Ok(OracleNorm {
        w_norm: RealVector::new(w.dtype(), norms),
        ledger: dense_baseline_bytes(w.rows(), w.cols(), w.dtype(), false),
    })
}

fn check_magnitude(op: &'static str, w: &RealMatrix, m: &Magnitude) -> Result<()> {
    if m.len() != w.rows() {
        return Err(DoraError::shape(op, format!("magnitude of length {}", w.rows()), m.len()));
    }
    Ok(())
}

/// `W' = m ⊙ V / max(‖V‖_row, eps)` with `V = W + s·BA`, all fp64. `eps` is
/// the norm guard of `W`'s dtype.
pub fn dense_composed_weight(w: &RealMatrix, adapter: &AdapterPair, m: &Magnitude) -> Result<RealMatrix> {
    composed_with_norm(w, adapter, m, None)
}

/// As [`dense_composed_weight`], but divides by `frozen_norm` when given
/// instead of the norm of the current `V`.
fn composed_with_norm(
    w: &RealMatrix,
    adapter: &AdapterPair,
    m: &Magnitude,
    frozen_norm: Option<&[f64]>,
) -> Result<RealMatrix> {
    adapter.check_weight("dense_composed_weight", w)?;
    check_magnitude("dense_composed_weight", w, m)?;
    check_cap("dense_composed_weight", w.cols(), DEFAULT_ORACLE_D_IN_CAP)?;
    let v = add_scaled(w, &dense_ba(adapter)?, adapter.scale);
    let norms = match frozen_norm {
        Some(n) => n.to_vec(),
        None => row_norms_f64(&v),
    };
    let eps = w.dtype().norm_eps();
    let mag = &m.values().data;
    Ok(RealMatrix::from_fn(v.rows(), v.cols(), DType::Fp64, |i, j| {
        mag[i] * v.get(i, j) / norms[i].max(eps)
    }))
}

/// `Y = X·W'ᵀ + bias` in fp64.
pub fn oracle_forward(
    x: &RealMatrix,
    w: &RealMatrix,
    bias: Option<&RealVector>,
    adapter: &AdapterPair,
    m: &Magnitude,
) -> Result<RealMatrix> {
    forward_with_norm(x, w, bias, adapter, m, None)
}

fn forward_with_norm(
    x: &RealMatrix,
    w: &RealMatrix,
    bias: Option<&RealVector>,
    adapter: &AdapterPair,
    m: &Magnitude,
    frozen_norm: Option<&[f64]>,
) -> Result<RealMatrix> {
    if x.cols() != w.cols() {
        return Err(DoraError::shape("oracle_forward", format!("X [rows, {}]", w.cols()), format!("{:?}", x.shape())));
    }
    if let Some(b) = bias {
        if b.len() != w.rows() {
            return Err(DoraError::shape("oracle_forward", format!("bias of length {}", w.rows()), b.len()));
        }
    }
    let w_prime = composed_with_norm(w, adapter, m, frozen_norm)?;
    let y = matmul_f64_nt(&as_f64(x), &w_prime)?;
    Ok(match bias {
        Some(b) => RealMatrix::from_fn(y.rows(), y.cols(), DType::Fp64, |i, j| y.get(i, j) + b.data[j]),
        None => y,
    })
}

/// How the norm is treated when differentiating the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormTreatment<'a> {
    /// Norm held at the given values; gradients do not see it.
    Detached(&'a [f64]),
    /// Norm recomputed from the perturbed parameters.
    Live,
}

/// Central-difference gradients of `Σ Y` from [`oracle_forward`].
#[derive(Debug, Clone)]
pub struct OracleGrads {
    pub d_a: RealMatrix,
    pub d_b: RealMatrix,
    pub d_mag: RealVector,
}

/// Central differences of `loss = Σ_ij Y[i,j]` with respect to `A`, `B` and
/// `m`, evaluated in fp64 with step `h·max(1, |θ|)`.
///
/// Only meant for small instances: every parameter costs two dense forwards.
pub fn finite_difference_grads(
    x: &RealMatrix,
    w: &RealMatrix,
    adapter: &AdapterPair,
    m: &Magnitude,
    norm: NormTreatment<'_>,
    h: f64,
) -> Result<OracleGrads> {
    let frozen = match norm {
        NormTreatment::Detached(n) => Some(n),
        NormTreatment::Live => None,
    };
    let adapter = AdapterPair::new(as_f64(&adapter.a), as_f64(&adapter.b), adapter.scale)?;
    let mag = Magnitude::new(RealVector::new(DType::Fp64, m.values().data.clone()))?;
    let loss = |ad: &AdapterPair, mg: &Magnitude| -> Result<f64> {
        Ok(forward_with_norm(x, w, None, ad, mg, frozen)?.data().iter().sum())
    };
    // central difference in one coordinate; `set` writes the perturbed value
    let diff = |theta: f64, eval: &dyn Fn(f64) -> Result<f64>| -> Result<f64> {
        let step = h * theta.abs().max(1.0);
        Ok((eval(theta + step)? - eval(theta - step)?) / (2.0 * step))
    };

    let mut d_a = RealMatrix::zeros(adapter.a.rows(), adapter.a.cols(), DType::Fp64);
    for i in 0..adapter.a.rows() {
        for j in 0..adapter.a.cols() {
            let g = diff(adapter.a.get(i, j), &|v| {
                let mut ad = adapter.clone();
                ad.a.set(i, j, v);
                loss(&ad, &mag)
            })?;
            d_a.set(i, j, g);
        }
    }
    let mut d_b = RealMatrix::zeros(adapter.b.rows(), adapter.b.cols(), DType::Fp64);
    for i in 0..adapter.b.rows() {
        for j in 0..adapter.b.cols() {
            let g = diff(adapter.b.get(i, j), &|v| {
                let mut ad = adapter.clone();
                ad.b.set(i, j, v);
                loss(&ad, &mag)
            })?;
            d_b.set(i, j, g);
        }
    }
    let mut d_mag = Vec::with_capacity(mag.len());
    for k in 0..mag.len() {
        d_mag.push(diff(mag.values().data[k], &|v| {
            let mut vals = mag.values().data.clone();
            vals[k] = v;
            loss(&adapter, &Magnitude::new(RealVector::new(DType::Fp64, vals))?)
        })?);
    }
    Ok(OracleGrads {
        d_a,
        d_b,
        d_mag: RealVector::new(DType::Fp64, d_mag),
    })
}

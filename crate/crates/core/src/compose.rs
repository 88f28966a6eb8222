//! The DoRA composition delta and its backward.
//!
//! ```text
//! delta = (g - 1) ⊙ base + g ⊙ (s · lora)
//! ```
//!
//! Every variant except [`naive_compose`] evaluates the same fp32 expression
//! in the same order: `t = s·lora`, then `g·t`, then `(g-1)·base`, then the
//! sum, rounding once to the storage dtype at the final store. Because the
//! per-element arithmetic is shared, the eager, fused and dual-output paths
//! are bitwise identical; they differ only in traversal and in the memory
//! traffic they account for.

use crate::error::{DoraError, Result};
use crate::linalg::{RealMatrix, RealVector};
use crate::numerics::DType;
use serde::Serialize;

pub const DEFAULT_TILE_ROWS: usize = 64;
/// Column block of the fused traversal; matches the kernel block width.
pub const BLOCK_COLS: usize = 128;

/// Operands of one composition. `base` is the frozen-path output without
/// bias, `lora` is `X·Aᵀ·Bᵀ` (unscaled), `g` is the per-column scale.
#[derive(Debug, Clone, Copy)]
pub struct ComposeInputs<'a> {
    pub base: &'a RealMatrix,
    pub lora: &'a RealMatrix,
    pub g: &'a [f64],
    pub scale: f64,
    pub dtype: DType,
}

impl<'a> ComposeInputs<'a> {
    pub fn new(base: &'a RealMatrix, lora: &'a RealMatrix, g: &'a [f64], scale: f64) -> Result<Self> {
        let inputs = Self {
            base,
            lora,
            g,
            scale,
            dtype: base.dtype(),
        };
        inputs.validate("ComposeInputs::new")?;
        Ok(inputs)
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.base.shape() != self.lora.shape() {
            return Err(DoraError::shape(
                op,
                format!("lora {:?}", self.base.shape()),
                format!("{:?}", self.lora.shape()),
            ));
        }
        if self.g.len() != self.base.cols() {
            return Err(DoraError::shape(
                op,
                format!("g of length {}", self.base.cols()),
                format!("length {}", self.g.len()),
            ));
        }
        Ok(())
    }

    fn require_contiguous(&self, op: &'static str) -> Result<()> {
        if !self.base.is_contiguous() || !self.lora.is_contiguous() {
            return Err(DoraError::InvalidConfig(format!(
                "{op} needs contiguous base and lora; use stable_compose"
            )));
        }
        Ok(())
    }

    fn rows(&self) -> usize {
        self.base.rows()
    }

    fn cols(&self) -> usize {
        self.base.cols()
    }
}

/// Element counts streamed by one composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TrafficReport {
    /// Activation-sized (`rows × d_out`) tensors read.
    pub activation_reads: u64,
    /// Activation-sized tensors written.
    pub activation_writes: u64,
    /// `d_out`-sized vectors read.
    pub vector_reads: u64,
    pub bytes_total: u64,
    /// Full-size memory passes. A fused kernel streams every operand in a
    /// single traversal and reports 1; the eager model reports one pass per
    /// activation-sized stream plus one per `g`-sized operand stream feeding
    /// an activation op.
    pub pass_count: u64,
    pub kernel_launches: u64,
}

/// Per-column fp32 operands, hoisted out of the row loop.
struct ColumnScalars {
    g: Vec<f32>,
    g_minus_one: Vec<f32>,
}

impl ColumnScalars {
    fn new(g: &[f64]) -> Self {
        let g: Vec<f32> = g.iter().map(|&v| v as f32).collect();
        let g_minus_one = g.iter().map(|&v| v - 1.0).collect();
        Self { g, g_minus_one }
    }
}

#[inline(always)]
fn delta_f32(base: f32, lora: f32, g: f32, g_minus_one: f32, s: f32) -> f32 {
    let t = s * lora;
    let scaled = g * t;
    let correction = g_minus_one * base;
    correction + scaled
}

#[inline(always)]
fn delta_f64(base: f64, lora: f64, g: f64, s: f64) -> f64 {
    let t = s * lora;
    let scaled = g * t;
    let correction = (g - 1.0) * base;
    correction + scaled
}

#[inline(always)]
fn inner_f32(base: f32, lora: f32, s: f32) -> f32 {
    let t = s * lora;
    t + base
}

/// Compose rows `rows` × columns `cols` into `delta` (and `inner`), which are
/// full-size row-major buffers.
fn compose_block(
    inputs: &ComposeInputs<'_>,
    scalars: &ColumnScalars,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    delta: &mut [f64],
    mut inner: Option<&mut [f64]>,
) {
    let d_out = inputs.cols();
    let dtype = inputs.dtype;
    let base = inputs.base.data();
    let lora = inputs.lora.data();
    if dtype == DType::Fp64 {
        for i in rows {
            for j in cols.clone() {
                let idx = i * d_out + j;
                delta[idx] = delta_f64(base[idx], lora[idx], inputs.g[j], inputs.scale);
                if let Some(inner) = inner.as_deref_mut() {
                    inner[idx] = inputs.scale * lora[idx] + base[idx];
                }
            }
        }
        return;
    }
    let s = inputs.scale as f32;
    for i in rows {
        for j in cols.clone() {
            let idx = i * d_out + j;
            let (b, l) = (base[idx] as f32, lora[idx] as f32);
            let d = delta_f32(b, l, scalars.g[j], scalars.g_minus_one[j], s);
            delta[idx] = dtype.round(d as f64);
            if let Some(inner) = inner.as_deref_mut() {
                inner[idx] = dtype.round(inner_f32(b, l, s) as f64);
            }
        }
    }
}

fn finish(inputs: &ComposeInputs<'_>, data: Vec<f64>) -> RealMatrix {
    RealMatrix::from_vec(inputs.rows(), inputs.cols(), inputs.dtype, data).expect("output sized from inputs")
}

/// Reference composition: one row-major sweep, fp32 intermediates, single
/// rounding at the store. Accepts strided inputs.
pub fn stable_compose(inputs: &ComposeInputs<'_>) -> Result<RealMatrix> {
    inputs.validate("stable_compose")?;
    let scalars = ColumnScalars::new(inputs.g);
    let mut delta = vec![0.0; inputs.base.len()];
    compose_block(inputs, &scalars, 0..inputs.rows(), 0..inputs.cols(), &mut delta, None);
    Ok(finish(inputs, delta))
}

/// `g ⊙ (s·lora + base) - base` with every operation rounded to the storage
/// dtype. Algebraically equal to the stable form, but when `g` is close to 1
/// it cancels catastrophically; kept to measure that.
pub fn naive_compose(inputs: &ComposeInputs<'_>) -> Result<RealMatrix> {
    inputs.validate("naive_compose")?;
    let dtype = inputs.dtype;
    let s = dtype.round(inputs.scale);
    let g: Vec<f64> = inputs.g.iter().map(|&v| dtype.round(v)).collect();
    let d_out = inputs.cols();
    let mut delta = Vec::with_capacity(inputs.base.len());
    for (base_row, lora_row) in inputs.base.data().chunks_exact(d_out.max(1)).zip(inputs.lora.data().chunks_exact(d_out.max(1))) {
        delta.extend(base_row.iter().zip(lora_row).zip(&g).map(|((&b, &l), &gj)| {
            let t = dtype.mul(s, l);
            let u = dtype.add(t, b);
            let v = dtype.mul(gj, u);
            dtype.sub(v, b)
        }));
    }
    Ok(finish(inputs, delta))
}

fn fused_traffic(inputs: &ComposeInputs<'_>, writes: u64) -> TrafficReport {
    let elem = inputs.dtype.storage_bytes();
    let n = (inputs.rows() * inputs.cols()) as u64;
    let reads = 2;
    TrafficReport {
        activation_reads: reads,
        activation_writes: writes,
        vector_reads: 1,
        bytes_total: (reads + writes) * n * elem + inputs.cols() as u64 * elem,
        pass_count: 1,
        kernel_launches: 1,
    }
}

fn tiled_traversal(inputs: &ComposeInputs<'_>, tile_rows: usize, delta: &mut [f64], mut inner: Option<&mut [f64]>) {
    let scalars = ColumnScalars::new(inputs.g);
    let (rows, cols) = (inputs.rows(), inputs.cols());
    for row_start in (0..rows).step_by(tile_rows) {
        let row_tile = row_start..(row_start + tile_rows).min(rows);
        for col_start in (0..cols).step_by(BLOCK_COLS) {
            let col_block = col_start..(col_start + BLOCK_COLS).min(cols);
            compose_block(inputs, &scalars, row_tile.clone(), col_block, delta, inner.as_deref_mut());
        }
    }
}

fn check_tile(tile_rows: usize) -> Result<()> {
    if tile_rows == 0 {
        return Err(DoraError::InvalidConfig("tile_rows must be >= 1".into()));
    }
    Ok(())
}

/// Single-pass tiled composition: each tile reads `base` and `lora` once and
/// writes `delta` once. Bitwise equal to [`stable_compose`].
pub fn fused_compose(inputs: &ComposeInputs<'_>, tile_rows: usize) -> Result<(RealMatrix, TrafficReport)> {
    inputs.validate("fused_compose")?;
    inputs.require_contiguous("fused_compose")?;
    check_tile(tile_rows)?;
    let mut delta = vec![0.0; inputs.base.len()];
    tiled_traversal(inputs, tile_rows, &mut delta, None);
    Ok((finish(inputs, delta), fused_traffic(inputs, 1)))
}

/// Output of the training-path composition.
#[derive(Debug, Clone)]
pub struct DualOutput {
    pub delta: RealMatrix,
    /// `s·lora + base`, present only when the magnitude needs a gradient.
    pub inner: Option<RealMatrix>,
    pub traffic: TrafficReport,
}

/// Fused composition that also emits `inner = s·lora + base` in the same pass
/// when `need_inner` is set. With a frozen magnitude the buffer is never
/// allocated and its write is not counted.
pub fn dual_output_compose(inputs: &ComposeInputs<'_>, need_inner: bool, tile_rows: usize) -> Result<DualOutput> {
    inputs.validate("dual_output_compose")?;
    inputs.require_contiguous("dual_output_compose")?;
    check_tile(tile_rows)?;
    let mut delta = vec![0.0; inputs.base.len()];
    let mut inner = need_inner.then(|| vec![0.0; inputs.base.len()]);
    tiled_traversal(inputs, tile_rows, &mut delta, inner.as_deref_mut());
    let writes = if need_inner { 2 } else { 1 };
    Ok(DualOutput {
        delta: finish(inputs, delta),
        inner: inner.map(|v| finish(inputs, v)),
        traffic: fused_traffic(inputs, writes),
    })
}

/// `inner = s·lora + base` on its own, as the eager path saves it. Same
/// arithmetic as the dual-output kernel.
pub fn compose_inner(inputs: &ComposeInputs<'_>) -> Result<RealMatrix> {
    inputs.validate("compose_inner")?;
    let dtype = inputs.dtype;
    let data = inputs
        .base
        .data()
        .iter()
        .zip(inputs.lora.data())
        .map(|(&b, &l)| {
            if dtype == DType::Fp64 {
                inputs.scale * l + b
            } else {
                dtype.round(inner_f32(b as f32, l as f32, inputs.scale as f32) as f64)
            }
        })
        .collect();
    Ok(finish(inputs, data))
}

/// Traffic of the unfused composition as four sequential elementwise ops:
///
/// 1. `t = s·lora`          read lora, write t
/// 2. `u = g·t`             read t and g, write u
/// 3. `c = (g-1)·base`      read base and g-1, write c
/// 4. `delta = c + u`       read c and u, write delta
///
/// plus the vector op forming `g - 1`. That is 5 activation reads, 4
/// activation writes, and 2 `g`-sized operand streams feeding activation ops.
pub fn eager_traffic_model(rows: usize, d_out: usize, dtype: DType) -> TrafficReport {
    let elem = dtype.storage_bytes();
    let n = (rows * d_out) as u64;
    let d = d_out as u64;
    let (reads, writes) = (5, 4);
    let g_streams = 2;
    // g-1 costs one vector read and one vector write of its own
    let vector_reads = g_streams + 1;
    let vector_bytes = (vector_reads + 1) * d * elem;
    TrafficReport {
        activation_reads: reads,
        activation_writes: writes,
        vector_reads,
        bytes_total: (reads + writes) * n * elem + vector_bytes,
        pass_count: reads + writes + g_streams,
        kernel_launches: 4,
    }
}

/// Gradients of the composition.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub d_lora: RealMatrix,
    pub d_base: RealMatrix,
    pub d_mag: Option<RealVector>,
}

/// Backward of the composition for upstream gradient `dy`.
///
/// `d_lora = g·(s·dy)` and `d_base = (g-1)·dy` come from one elementwise
/// pass. `d_mag[j] = Σ_i dy[i,j]·inner[i,j] / max(w_norm[j], eps)` is a
/// separate column reduction, serial over ascending rows in fp32, with the
/// division applied once per column after the sum.
pub fn compose_backward(
    dy: &RealMatrix,
    g: &[f64],
    scale: f64,
    inner: Option<&RealMatrix>,
    w_norm: &[f64],
    mag_grad: bool,
) -> Result<GradBundle> {
    let (rows, d_out) = dy.shape();
    let dtype = dy.dtype();
    if g.len() != d_out {
        return Err(DoraError::shape("compose_backward", format!("g of length {d_out}"), g.len()));
    }
    let mut d_lora = vec![0.0; dy.len()];
    let mut d_base = vec![0.0; dy.len()];
    if dtype == DType::Fp64 {
        for (idx, &v) in dy.data().iter().enumerate() {
            let gj = g[idx % d_out];
            d_lora[idx] = gj * (scale * v);
            d_base[idx] = (gj - 1.0) * v;
        }
    } else {
        let scalars = ColumnScalars::new(g);
        let s = scale as f32;
        for (idx, &v) in dy.data().iter().enumerate() {
            let j = idx % d_out;
            let v = v as f32;
            let t = s * v;
            d_lora[idx] = dtype.round((scalars.g[j] * t) as f64);
            d_base[idx] = dtype.round((scalars.g_minus_one[j] * v) as f64);
        }
    }

    let d_mag = if mag_grad {
        let inner = inner.ok_or(DoraError::MissingSaved("inner"))?;
        if inner.shape() != dy.shape() || w_norm.len() != d_out {
            return Err(DoraError::shape(
                "compose_backward",
                format!("inner {:?}, w_norm [{d_out}]", dy.shape()),
                format!("inner {:?}, w_norm [{}]", inner.shape(), w_norm.len()),
            ));
        }
        Some(magnitude_grad(dy, inner, w_norm, rows, d_out))
    } else {
        None
    };

    Ok(GradBundle {
        d_lora: RealMatrix::from_vec(rows, d_out, dtype, d_lora)?,
        d_base: RealMatrix::from_vec(rows, d_out, dtype, d_base)?,
        d_mag,
    })
}

fn magnitude_grad(dy: &RealMatrix, inner: &RealMatrix, w_norm: &[f64], rows: usize, d_out: usize) -> RealVector {
    let dtype = dy.dtype();
    let eps = dtype.round(dtype.norm_eps());
    let out = (0..d_out)
        .map(|j| {
            let denom = dtype.round(w_norm[j]).max(eps);
            if dtype == DType::Fp64 {
                let sum: f64 = (0..rows).map(|i| dy.get(i, j) * inner.get(i, j)).sum();
                sum / denom
            } else {
                let mut acc = 0.0f32;
                for i in 0..rows {
                    acc += dy.get(i, j) as f32 * inner.get(i, j) as f32;
                }
                (acc / denom as f32) as f64
            }
        })
        .collect();
    RealVector::new(dtype, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_fixture, Fixture};

    fn fixture(rows: usize, cols: usize, seed: u64, dtype: DType) -> RealMatrix {
        seeded_fixture(Fixture::STANDARD_NORMAL, rows, cols, seed, dtype)
    }

    fn g_near_one(n: usize, seed: u64) -> Vec<f64> {
        crate::linalg::seeded_values(Fixture::Gaussian { mean: 1.0, std: 0.05 }, n, seed)
            .into_iter()
            .map(|v| v as f32 as f64)
            .collect()
    }

    #[test]
    fn unit_g_reduces_to_scaled_lora() {
        let base = fixture(5, 7, 1, DType::Bf16);
        let lora = fixture(5, 7, 2, DType::Bf16);
        let g = vec![1.0; 7];
        let inputs = ComposeInputs::new(&base, &lora, &g, 0.37).unwrap();
        let want = RealMatrix::from_fn(5, 7, DType::Bf16, |i, j| (0.37f32 * lora.get(i, j) as f32) as f64);
        assert!(stable_compose(&inputs).unwrap().bitwise_eq(&want));
    }

    #[test]
    fn zero_scale_unit_g_is_zero() {
        let base = fixture(3, 4, 1, DType::Fp32);
        let lora = fixture(3, 4, 2, DType::Fp32);
        let g = vec![1.0; 4];
        let inputs = ComposeInputs::new(&base, &lora, &g, 0.0).unwrap();
        assert_eq!(stable_compose(&inputs).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn doubling_g() {
        let ones = RealMatrix::filled(2, 3, DType::Fp32, 1.0);
        let g = vec![2.0; 3];
        let inputs = ComposeInputs::new(&ones, &ones, &g, 0.5).unwrap();
        assert!(stable_compose(&inputs).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn naive_examples() {
        let base = fixture(4, 6, 1, DType::Fp32);
        let lora = fixture(4, 6, 2, DType::Fp32);
        let g = vec![1.0; 6];
        let inputs = ComposeInputs::new(&base, &lora, &g, 1.0).unwrap();
        // s = 1 and g = 1: t = lora, u = lora + base, u - base only equals lora
        // when the sum is exact; check against the rounded per-op definition.
        let naive = naive_compose(&inputs).unwrap();
        for (idx, &v) in naive.data().iter().enumerate() {
            let (b, l) = (base.data()[idx] as f32, lora.data()[idx] as f32);
            assert_eq!(v, ((l + b) - b) as f64);
        }

        let ones = RealMatrix::filled(1, 1, DType::Fp32, 1.0);
        let g = vec![2.0];
        let inputs = ComposeInputs::new(&ones, &ones, &g, 1.0).unwrap();
        assert_eq!(naive_compose(&inputs).unwrap().data(), &[3.0]);
    }

    #[test]
    fn naive_cancels_in_bf16_collapse_zone() {
        let base = RealMatrix::filled(1, 1, DType::Bf16, 256.0);
        let lora = RealMatrix::zeros(1, 1, DType::Bf16);
        let g = vec![1.0 + 2f64.powi(-9)];
        let inputs = ComposeInputs::new(&base, &lora, &g, 1.0).unwrap();
        let exact = (g[0] - 1.0) * 256.0;
        assert_eq!(exact, 0.5);
        assert_eq!(naive_compose(&inputs).unwrap().data(), &[0.0]);
        assert_eq!(stable_compose(&inputs).unwrap().data(), &[0.5]);
    }

    #[test]
    fn exact_unit_g_cancels_base_in_naive() {
        let base = RealMatrix::filled(2, 2, DType::Fp32, 3.0);
        let lora = RealMatrix::filled(2, 2, DType::Fp32, 0.5);
        let g = vec![1.0; 2];
        let inputs = ComposeInputs::new(&base, &lora, &g, 2.0).unwrap();
        assert_eq!(naive_compose(&inputs).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn fused_and_dual_match_stable() {
        for (rows, cols, dtype) in [(1, 1, DType::Fp32), (67, 130, DType::Bf16), (130, 257, DType::Fp16), (3, 5, DType::Fp64)] {
            let base = fixture(rows, cols, 10, dtype);
            let lora = fixture(rows, cols, 11, dtype);
            let g = g_near_one(cols, 12);
            let inputs = ComposeInputs::new(&base, &lora, &g, 0.8).unwrap();
            let stable = stable_compose(&inputs).unwrap();
            for tile in [1, 7, 64, 1000] {
                let (fused, traffic) = fused_compose(&inputs, tile).unwrap();
                assert!(fused.bitwise_eq(&stable), "{rows}x{cols} {dtype} tile {tile}");
                assert_eq!(traffic.pass_count, 1);
                let dual = dual_output_compose(&inputs, true, tile).unwrap();
                assert!(dual.delta.bitwise_eq(&stable));
                assert!(dual.inner.unwrap().bitwise_eq(&compose_inner(&inputs).unwrap()));
            }
        }
    }

    #[test]
    fn dual_without_inner() {
        let base = RealMatrix::zeros(3, 4, DType::Fp32);
        let lora = fixture(3, 4, 2, DType::Fp32);
        let g = vec![1.0; 4];
        let inputs = ComposeInputs::new(&base, &lora, &g, 1.0).unwrap();
        let out = dual_output_compose(&inputs, false, DEFAULT_TILE_ROWS).unwrap();
        assert!(out.inner.is_none());
        assert_eq!(out.traffic.activation_writes, 1);
        assert!(out.delta.bitwise_eq(&lora));
        let out = dual_output_compose(&inputs, true, DEFAULT_TILE_ROWS).unwrap();
        assert!(out.inner.unwrap().bitwise_eq(&lora));
        assert_eq!(out.traffic.activation_writes, 2);
    }

    #[test]
    fn fused_rejects_strided_input() {
        let base = fixture(2, 2, 1, DType::Fp32).as_strided_view();
        let lora = fixture(2, 2, 2, DType::Fp32);
        let g = vec![1.0; 2];
        let inputs = ComposeInputs::new(&base, &lora, &g, 1.0).unwrap();
        assert!(fused_compose(&inputs, 64).is_err());
        assert!(dual_output_compose(&inputs, true, 64).is_err());
        assert!(stable_compose(&inputs).is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let base = RealMatrix::zeros(2, 3, DType::Fp32);
        let lora = RealMatrix::zeros(3, 2, DType::Fp32);
        assert!(ComposeInputs::new(&base, &lora, &[1.0; 3], 1.0).is_err());
        assert!(ComposeInputs::new(&base, &base, &[1.0; 2], 1.0).is_err());
    }

    #[test]
    fn fused_traffic_bytes() {
        let m = RealMatrix::zeros(4096, 4096, DType::Fp32);
        let g = vec![1.0; 4096];
        let inputs = ComposeInputs::new(&m, &m, &g, 1.0).unwrap();
        let (_, t) = fused_compose(&inputs, DEFAULT_TILE_ROWS).unwrap();
        assert_eq!(t.bytes_total, 3 * 4096 * 4096 * 4 + 4096 * 4);
        assert_eq!((t.activation_reads, t.activation_writes, t.pass_count), (2, 1, 1));
    }

    #[test]
    fn eager_model_counts() {
        for (rows, d_out) in [(1, 1), (4096, 4096), (7, 512)] {
            let e = eager_traffic_model(rows, d_out, DType::Bf16);
            assert!((10..=12).contains(&e.pass_count));
            let m = RealMatrix::zeros(rows, d_out, DType::Bf16);
            let g = vec![1.0; d_out];
            let (_, f) = fused_compose(&ComposeInputs::new(&m, &m, &g, 1.0).unwrap(), 64).unwrap();
            let ratio = e.bytes_total as f64 / f.bytes_total as f64;
            assert!((2.5..=4.0).contains(&ratio), "{rows}x{d_out}: {ratio}");
        }
        let tiny = eager_traffic_model(1, 1, DType::Fp32);
        assert_eq!(tiny.bytes_total, (9 + 4) * 4);
    }

    #[test]
    fn backward_unit_g() {
        let dy = fixture(6, 5, 3, DType::Fp32);
        let out = compose_backward(&dy, &[1.0; 5], 0.25, None, &[1.0; 5], false).unwrap();
        assert!(out.d_base.data().iter().all(|&v| v == 0.0));
        let want = RealMatrix::from_fn(6, 5, DType::Fp32, |i, j| (0.25f32 * dy.get(i, j) as f32) as f64);
        assert!(out.d_lora.bitwise_eq(&want));
        assert!(out.d_mag.is_none());
    }

    #[test]
    fn backward_doubling_g() {
        let dy = RealMatrix::filled(3, 3, DType::Fp32, 1.0);
        let out = compose_backward(&dy, &[2.0; 3], 0.5, None, &[1.0; 3], false).unwrap();
        assert!(out.d_lora.data().iter().all(|&v| v == 1.0));
        assert!(out.d_base.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_needs_inner_for_mag_grad() {
        let dy = RealMatrix::zeros(2, 2, DType::Fp32);
        let err = compose_backward(&dy, &[1.0; 2], 1.0, None, &[1.0; 2], true).unwrap_err();
        assert_eq!(err, DoraError::MissingSaved("inner"));
    }

    fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
            / scale
    }

    /// Central differences of `L = Σ dy ⊙ delta` with delta from
    /// `stable_compose` and g from `magnitude_scale`, both at fp64.
    #[test]
    fn backward_matches_finite_differences() {
        use crate::factored_norm::{magnitude_scale, Magnitude};
        let dt = DType::Fp32;
        let mut case = 0u64;
        for &rows in &[3usize, 8, 64] {
            for &d_out in &[3usize, 8, 64] {
                for rep in 0..3 {
                    case += 1;
                    let seed = 1000 * case + rep;
                    let base = fixture(rows, d_out, seed, dt);
                    let lora = fixture(rows, d_out, seed + 1, dt);
                    let dy = fixture(rows, d_out, seed + 2, dt);
                    let w_norm = RealVector::new(
                        dt,
                        crate::linalg::seeded_values(Fixture::Uniform { low: 0.5, high: 2.0 }, d_out, seed + 3),
                    );
                    let m_vals: Vec<f64> = w_norm.data.iter().zip(g_near_one(d_out, seed + 4)).map(|(w, g)| w * g).collect();
                    let m = Magnitude::new(RealVector::new(dt, m_vals)).unwrap();
                    let s = 0.75;

                    // evaluated in fp64 so the difference quotient is not swamped by
                    // fp32 store rounding of the small (g - 1) term
                    let loss = |base: &RealMatrix, lora: &RealMatrix, m: &Magnitude| -> f64 {
                        let g = magnitude_scale(m, &w_norm, DType::Fp64).unwrap();
                        let (base, lora) = (base.cast(DType::Fp64), lora.cast(DType::Fp64));
                        let inputs = ComposeInputs::new(&base, &lora, &g.data, s).unwrap();
                        let d = stable_compose(&inputs).unwrap();
                        d.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
                    };

                    let g = magnitude_scale(&m, &w_norm, dt).unwrap();
                    let inputs = ComposeInputs::new(&base, &lora, &g.data, s).unwrap();
                    let inner = compose_inner(&inputs).unwrap();
                    let grads = compose_backward(&dy, &g.data, s, Some(&inner), &w_norm.data, true).unwrap();

                    let fd_matrix = |which: u8| -> Vec<f64> {
                        let src = if which == 0 { &lora } else { &base };
                        (0..src.len())
                            .map(|idx| {
                                let (i, j) = (idx / d_out, idx % d_out);
                                let theta = src.get(i, j);
                                let h = 1e-3 * theta.abs().max(1.0);
                                let mut plus = src.clone();
                                plus.set(i, j, theta + h);
                                let mut minus = src.clone();
                                minus.set(i, j, theta - h);
                                let step = plus.get(i, j) - minus.get(i, j);
                                let (lp, lm) = if which == 0 {
                                    (loss(&base, &plus, &m), loss(&base, &minus, &m))
                                } else {
                                    (loss(&plus, &lora, &m), loss(&minus, &lora, &m))
                                };
                                (lp - lm) / step
                            })
                            .collect()
                    };
                    let fd_mag: Vec<f64> = (0..d_out)
                        .map(|j| {
                            let theta = m.values().data[j];
                            let h = 1e-3 * theta.abs().max(1.0);
                            let bump = |delta: f64| {
                                let mut v = m.values().data.clone();
                                v[j] = theta + delta;
                                let mv = Magnitude::new(RealVector::new(dt, v)).unwrap();
                                (mv.values().data[j], loss(&base, &lora, &mv))
                            };
                            let ((tp, lp), (tm, lm)) = (bump(h), bump(-h));
                            (lp - lm) / (tp - tm)
                        })
                        .collect();

                    let e_lora = rel_err(grads.d_lora.data(), &fd_matrix(0));
                    let e_base = rel_err(grads.d_base.data(), &fd_matrix(1));
                    let e_mag = rel_err(&grads.d_mag.unwrap().data, &fd_mag);
                    assert!(e_lora <= 1e-3, "{rows}x{d_out}: d_lora rel err {e_lora:e}");
                    assert!(e_base <= 1e-3, "{rows}x{d_out}: d_base rel err {e_base:e}");
                    assert!(e_mag <= 1e-3, "{rows}x{d_out}: d_mag rel err {e_mag:e}");
                }
            }
        }
    }
}

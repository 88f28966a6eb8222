//! Row-major matrices, deterministic matmul, chunk planning, and fixtures.
//!
//! Every reduction here sums in ascending index order. Row-level parallelism
//! is used for large products, but each output element is produced by a
//! single thread with a fixed loop order, so results are bitwise identical
//! regardless of thread count.

use crate::error::{DoraError, Result};
use crate::numerics::DType;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::ops::Range;

/// Dense row-major matrix whose values are all representable in `dtype`.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    dtype: DType,
    data: Vec<f64>,
    contiguous: bool,
}

impl RealMatrix {
    /// Build from raw values, rounding each to `dtype`.
    pub fn from_vec(rows: usize, cols: usize, dtype: DType, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DoraError::shape(
                "RealMatrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        if dtype != DType::Fp64 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        Ok(Self {
            rows,
            cols,
            dtype,
            data,
            contiguous: true,
        })
    }

    pub fn from_rows(dtype: DType, rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DoraError::shape("RealMatrix::from_rows", "equal row lengths", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), cols, dtype, data)
    }

    pub fn from_f32(rows: usize, cols: usize, dtype: DType, data: &[f32]) -> Result<Self> {
        Self::from_vec(rows, cols, dtype, data.iter().map(|&v| v as f64).collect())
    }

    pub fn from_fn(rows: usize, cols: usize, dtype: DType, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(dtype.round(f(i, j)));
            }
        }
        Self {
            rows,
            cols,
            dtype,
            data,
            contiguous: true,
        }
    }

    pub fn zeros(rows: usize, cols: usize, dtype: DType) -> Self {
        Self {
            rows,
            cols,
            dtype,
            data: vec![0.0; rows * cols],
            contiguous: true,
        }
    }

    pub fn identity(n: usize, dtype: DType) -> Self {
        Self::from_fn(n, n, dtype, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn filled(rows: usize, cols: usize, dtype: DType, value: f64) -> Self {
        Self::from_fn(rows, cols, dtype, |_, _| value)
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_contiguous(&self) -> bool {
        self.contiguous
    }

    /// Tag the matrix as a strided view. Values are unaffected; only layout
    /// checks in dispatch observe the flag.
    pub fn as_strided_view(mut self) -> Self {
        self.contiguous = false;
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Overwrite one element, rounding to the matrix dtype.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = self.dtype.round(value);
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            dtype: self.dtype,
            data,
            contiguous: true,
        }
    }

    /// Re-round every element to `dtype`.
    pub fn cast(&self, dtype: DType) -> Self {
        Self::from_fn(self.rows, self.cols, dtype, |i, j| self.get(i, j))
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Columns `range` of every row, widened to `T`, as a dense row-major block.
    pub fn column_block<T: Float>(&self, range: Range<usize>) -> Vec<T> {
        let width = range.len();
        let mut out = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            let row = self.row(i);
            out.extend(row[range.clone()].iter().map(|&v| T::from(v).unwrap()));
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Dense vector with a dtype tag; the per-row companion of [`RealMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct RealVector {
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl RealVector {
    pub fn new(dtype: DType, data: Vec<f64>) -> Self {
        let data = data.into_iter().map(|v| dtype.round(v)).collect();
        Self { dtype, data }
    }

    pub fn filled(len: usize, dtype: DType, value: f64) -> Self {
        Self::new(dtype, vec![value; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub const DEFAULT_CHUNK_BUDGET_BYTES: u64 = 256 * 1024 * 1024;
pub const CHUNK_ALIGNMENT: usize = 64;

/// Column chunking of a `[d_out, d_in]` weight under a byte budget for the
/// fp32 chunk buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct ChunkPlan {
    pub budget_bytes: u64,
    pub d_out: usize,
    pub d_in: usize,
    pub chunk_size: usize,
    pub alignment: usize,
    pub num_chunks: usize,
}

impl ChunkPlan {
    pub fn budget_from_mb(mb: u64) -> u64 {
        mb * 1024 * 1024
    }

    /// Column ranges in ascending order.
    pub fn ranges(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.num_chunks).map(move |c| {
            let start = c * self.chunk_size;
            start..(start + self.chunk_size).min(self.d_in)
        })
    }
}

/// Plan `d_in` chunks so one fp32 `[d_out, chunk]` buffer fits `budget_bytes`.
///
/// The chunk width is `min(d_in, budget / (4 d_out))` rounded down to a
/// multiple of 64, never below `min(64, d_in)`. Budgets that cannot hold that
/// minimum width are rejected rather than silently exceeded.
pub fn plan_chunks(d_out: usize, d_in: usize, budget_bytes: u64) -> Result<ChunkPlan> {
    if d_out == 0 || d_in == 0 {
        return Err(DoraError::InvalidConfig(format!(
            "chunk plan needs d_out, d_in >= 1 (got {d_out}, {d_in})"
        )));
    }
    if budget_bytes < 256 {
        return Err(DoraError::InvalidConfig(format!(
            "chunk budget must be at least 256 bytes (got {budget_bytes})"
        )));
    }
    let floor = CHUNK_ALIGNMENT.min(d_in);
    let fit = (budget_bytes / (d_out as u64 * 4)) as usize;
    if fit < floor {
        return Err(DoraError::BudgetTooSmall {
            budget_bytes,
            d_out,
            min_width: floor,
        });
    }
    let raw = d_in.min(fit);
    let chunk_size = (raw / CHUNK_ALIGNMENT * CHUNK_ALIGNMENT).max(floor);
    Ok(ChunkPlan {
        budget_bytes,
        d_out,
        d_in,
        chunk_size,
        alignment: CHUNK_ALIGNMENT,
        num_chunks: d_in.div_ceil(chunk_size),
    })
}

const PAR_THRESHOLD: usize = 1 << 16;

/// `out[m, n] = a[m, k] * b[k, n]`, each element summed over ascending `k`.
pub(crate) fn gemm_nn<T: Float + Send + Sync>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if n == 0 {
        return out;
    }
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[m, n] = a[m, k] * b[n, k]^T`, each element summed over ascending `k`.
pub(crate) fn gemm_nt<T: Float + Send + Sync>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm_nt_into(a, b, m, k, n, &mut out);
    out
}

/// `out += a * b^T`, continuing each element's running sum over ascending `k`.
///
/// Splitting `k` into consecutive blocks and calling this once per block
/// performs exactly the additions of a single call over the whole range, so
/// the result does not depend on the blocking.
pub(crate) fn gemm_nt_into<T: Float + Send + Sync>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = *o;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            *o = acc;
        }
    };
    if n == 0 {
        return;
    }
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

fn check_inner(op: &'static str, a: &RealMatrix, b_inner: usize, b: &RealMatrix) -> Result<()> {
    if a.cols() != b_inner {
        return Err(DoraError::shape(
            op,
            format!("rhs inner dimension {}", a.cols()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// fp32 product `a * b`. Inputs are widened to fp32; the result is tagged fp32.
pub fn matmul_f32(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    check_inner("matmul_f32", a, b.rows(), b)?;
    let out = gemm_nn(&a.to_f32_vec(), &b.to_f32_vec(), a.rows(), a.cols(), b.cols());
    RealMatrix::from_f32(a.rows(), b.cols(), DType::Fp32, &out)
}

/// fp32 product `a * b^T` without materializing the transpose.
pub fn matmul_f32_nt(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    check_inner("matmul_f32_nt", a, b.cols(), b)?;
    let out = gemm_nt(&a.to_f32_vec(), &b.to_f32_vec(), a.rows(), a.cols(), b.rows());
    RealMatrix::from_f32(a.rows(), b.rows(), DType::Fp32, &out)
}

/// fp64 product `a * b`; oracle arithmetic.
pub fn matmul_f64(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    check_inner("matmul_f64", a, b.rows(), b)?;
    let out = gemm_nn(a.data(), b.data(), a.rows(), a.cols(), b.cols());
    RealMatrix::from_vec(a.rows(), b.cols(), DType::Fp64, out)
}

/// fp64 product `a * b^T`; oracle arithmetic.
pub fn matmul_f64_nt(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    check_inner("matmul_f64_nt", a, b.cols(), b)?;
    let out = gemm_nt(a.data(), b.data(), a.rows(), a.cols(), b.rows());
    RealMatrix::from_vec(a.rows(), b.rows(), DType::Fp64, out)
}

/// Fixture distributions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fixture {
    Gaussian { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

impl Fixture {
    pub const STANDARD_NORMAL: Fixture = Fixture::Gaussian { mean: 0.0, std: 1.0 };
    pub const UNIT_UNIFORM: Fixture = Fixture::Uniform { low: 0.0, high: 1.0 };
}

/// Deterministic generator for fixtures: ChaCha8 seeded from a `u64`.
///
/// Gaussian draws use `rand_distr::StandardNormal` (ziggurat); uniform draws
/// use the 53-bit `[0, 1)` conversion. Both are platform independent for a
/// fixed crate version.
pub fn fixture_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn seeded_values(kind: Fixture, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = fixture_rng(seed);
    (0..n)
        .map(|_| match kind {
            Fixture::Gaussian { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + std * z
            }
            Fixture::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        })
        .collect()
}

pub fn seeded_fixture(kind: Fixture, rows: usize, cols: usize, seed: u64, dtype: DType) -> RealMatrix {
    let values = seeded_values(kind, rows * cols, seed);
    RealMatrix::from_vec(rows, cols, dtype, values).expect("length matches by construction")
}

/// Derive an independent stream seed (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1024 * 1024;

    #[test]
    fn plan_full_span() {
        let p = plan_chunks(8192, 8192, 256 * MB).unwrap();
        assert_eq!((p.chunk_size, p.num_chunks), (8192, 1));
    }

    #[test]
    fn plan_wide_weight() {
        let p = plan_chunks(8192, 28672, 256 * MB).unwrap();
        assert_eq!((p.chunk_size, p.num_chunks), (8192, 4));
        let r: Vec<_> = p.ranges().collect();
        assert_eq!(r.last().unwrap().clone(), 24576..28672);
    }

    #[test]
    fn plan_tiny_weight() {
        let p = plan_chunks(4, 4, 256 * MB).unwrap();
        assert_eq!((p.chunk_size, p.num_chunks), (4, 1));
    }

    #[test]
    fn plan_rounds_to_alignment() {
        // 100 columns fit, aligned down to 64.
        let p = plan_chunks(1, 100, 4096).unwrap();
        assert_eq!((p.chunk_size, p.num_chunks), (64, 2));
        let p = plan_chunks(10, 1000, 10 * 4 * 130).unwrap();
        assert_eq!(p.chunk_size, 128);
        assert!(p.chunk_size as u64 * 10 * 4 <= p.budget_bytes);
    }

    #[test]
    fn plan_rejects_small_budget() {
        let err = plan_chunks(8192, 8192, 1024).unwrap_err();
        assert!(matches!(err, DoraError::BudgetTooSmall { .. }));
        assert!(plan_chunks(1, 1, 100).is_err());
    }

    #[test]
    fn identity_product() {
        let m = RealMatrix::from_rows(DType::Fp32, &[&[1.5, -2.0, 3.0], &[0.25, 7.0, -1.0]]).unwrap();
        let out = matmul_f32(&RealMatrix::identity(2, DType::Fp32), &m).unwrap();
        assert!(out.bitwise_eq(&m));
    }

    #[test]
    fn small_product() {
        let a = RealMatrix::from_rows(DType::Fp32, &[&[1.0, 2.0]]).unwrap();
        let b = RealMatrix::from_rows(DType::Fp32, &[&[3.0], &[4.0]]).unwrap();
        assert_eq!(matmul_f32(&a, &b).unwrap().data(), &[11.0]);
        assert_eq!(matmul_f32_nt(&a, &b.transpose()).unwrap().data(), &[11.0]);
    }

    #[test]
    fn product_shape_mismatch() {
        let a = RealMatrix::zeros(2, 3, DType::Fp32);
        assert!(matmul_f32(&a, &a).is_err());
        assert!(matmul_f32_nt(&a, &RealMatrix::zeros(2, 2, DType::Fp32)).is_err());
    }

    #[test]
    fn random_product_matches_triple_loop() {
        let a = seeded_fixture(Fixture::STANDARD_NORMAL, 64, 96, 1, DType::Fp32);
        let b = seeded_fixture(Fixture::STANDARD_NORMAL, 96, 8, 2, DType::Fp32);
        let got = matmul_f32(&a, &b).unwrap();
        for i in 0..64 {
            for j in 0..8 {
                let mut exact = 0.0f64;
                let mut abs = 0.0f64;
                for k in 0..96 {
                    exact += a.get(i, k) * b.get(k, j);
                    abs += (a.get(i, k) * b.get(k, j)).abs();
                }
                let err = (got.get(i, j) - exact).abs();
                // relative to the magnitude of the summands: a cancelling dot
                // product has no meaningful relative error on its own value
                assert!(err <= 1e-6 * abs, "({i},{j}) err {err:e} vs scale {abs:e}");
            }
        }
    }

    #[test]
    fn parallel_product_is_bitwise_stable() {
        let a = seeded_fixture(Fixture::STANDARD_NORMAL, 128, 257, 3, DType::Fp32);
        let b = seeded_fixture(Fixture::STANDARD_NORMAL, 257, 33, 4, DType::Fp32);
        let first = matmul_f32(&a, &b).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let serial = pool.install(|| matmul_f32(&a, &b).unwrap());
        assert!(first.bitwise_eq(&serial));
        let nt = matmul_f32_nt(&a, &b.transpose()).unwrap();
        assert!(first.bitwise_eq(&nt));
    }

    #[test]
    fn fixtures_are_deterministic() {
        let x = seeded_fixture(Fixture::STANDARD_NORMAL, 2, 2, 0, DType::Fp32);
        let y = seeded_fixture(Fixture::STANDARD_NORMAL, 2, 2, 0, DType::Fp32);
        assert!(x.bitwise_eq(&y));
        let u = seeded_fixture(Fixture::UNIT_UNIFORM, 1, 1, 42, DType::Fp64);
        assert!((0.0..1.0).contains(&u.get(0, 0)));
    }

    #[test]
    fn gaussian_mean_within_clt_bound() {
        let n = 10_000;
        for seed in [0u64, 7, 12345] {
            let v = seeded_values(Fixture::STANDARD_NORMAL, n, seed);
            let mean = v.iter().sum::<f64>() / n as f64;
            assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn fixtures_round_to_dtype() {
        let m = seeded_fixture(Fixture::STANDARD_NORMAL, 8, 8, 9, DType::Bf16);
        assert!(m.data().iter().all(|&v| DType::Bf16.is_representable(v)));
    }
}

//! DoRA linear layer: forward with fresh norm and dispatched compose, and the
//! matching backward.
//!
//! ```text
//! base  = X·Wᵀ                    lora = (X·Aᵀ)·Bᵀ
//! w_norm = ‖W + sBA‖_row (value only)   g = m / max(w_norm, eps)
//! delta = (g-1)⊙base + g⊙(s·lora)
//! Y     = base + delta + bias
//! ```
//!
//! Matmuls accumulate in fp32 (fp64 for an fp64 working dtype) and round to
//! the working dtype at store. The norm is recomputed on every forward and is
//! a constant as far as the backward is concerned.

use crate::compose::{
    compose_backward, compose_inner, dual_output_compose, fused_compose, stable_compose, ComposeInputs,
    DEFAULT_TILE_ROWS,
};
use crate::dispatch::{select_tier, shape_guard, DispatchContext, Tier, TierDecision};
use crate::error::{DoraError, Result};
use crate::factored_norm::{factored_row_norm, magnitude_scale, AdapterPair, Magnitude};
use crate::linalg::{
    matmul_f32, matmul_f32_nt, matmul_f64, matmul_f64_nt, plan_chunks, ChunkPlan, RealMatrix, RealVector,
    DEFAULT_CHUNK_BUDGET_BYTES,
};
use crate::numerics::DType;

#[derive(Debug, Clone)]
pub struct DoraLinearState {
    /// Frozen `[d_out, d_in]` weight.
    pub w: RealMatrix,
    pub bias: Option<RealVector>,
    pub adapter: AdapterPair,
    pub magnitude: Magnitude,
    pub magnitude_trainable: bool,
    pub working_dtype: DType,
    /// Per-call fields (`rows`, `d_out`, layout flags) are filled in by the
    /// forward; the rest is used as given.
    pub dispatch: DispatchContext,
    pub chunk_plan: ChunkPlan,
}

impl DoraLinearState {
    /// Training-mode state with a trainable magnitude, every dispatch guard
    /// passing, and the default norm chunk budget.
    pub fn new(
        w: RealMatrix,
        bias: Option<RealVector>,
        adapter: AdapterPair,
        magnitude: Magnitude,
        working_dtype: DType,
    ) -> Result<Self> {
        adapter.check_weight("DoraLinearState::new", &w)?;
        if magnitude.len() != w.rows() {
            return Err(DoraError::shape(
                "DoraLinearState::new",
                format!("magnitude of length {}", w.rows()),
                magnitude.len(),
            ));
        }
        if let Some(b) = &bias {
            if b.len() != w.rows() {
                return Err(DoraError::shape(
                    "DoraLinearState::new",
                    format!("bias of length {}", w.rows()),
                    b.len(),
                ));
            }
        }
        let chunk_plan = plan_chunks(w.rows(), w.cols(), DEFAULT_CHUNK_BUDGET_BYTES)?;
        Ok(Self {
            dispatch: DispatchContext::accelerated(true, 0, w.rows()),
            w,
            bias,
            adapter,
            magnitude,
            magnitude_trainable: true,
            working_dtype,
            chunk_plan,
        })
    }

    pub fn with_chunk_budget(mut self, budget_bytes: u64) -> Result<Self> {
        self.chunk_plan = plan_chunks(self.w.rows(), self.w.cols(), budget_bytes)?;
        Ok(self)
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    fn needs_inner(&self) -> bool {
        self.magnitude_trainable && self.dispatch.requires_grad
    }

    fn context(&self, x: &RealMatrix) -> DispatchContext {
        let mut ctx = self.dispatch;
        ctx.rows = x.rows();
        ctx.d_out = self.d_out();
        ctx.contiguous &= x.is_contiguous();
        ctx.mag_broadcast_last_dim &= shape_guard(&[x.rows(), self.d_out()], &[self.d_out()]);
        ctx.d_out_divisible_128 &= self.d_out().is_multiple_of(128);
        ctx
    }
}

/// What the forward keeps for the backward.
#[derive(Debug, Clone)]
pub struct SavedForward {
    pub x: RealMatrix,
    /// `X·Aᵀ`, `[rows, r]`.
    pub xa: RealMatrix,
    pub g: RealVector,
    pub w_norm: RealVector,
    /// `s·lora + base`, only when the magnitude is trained.
    pub inner: Option<RealMatrix>,
    pub lora_out: RealMatrix,
    pub base_out: RealMatrix,
    pub delta: RealMatrix,
    pub decision: TierDecision,
}

fn product(a: &RealMatrix, b: &RealMatrix, dtype: DType) -> Result<RealMatrix> {
    Ok(if dtype == DType::Fp64 {
        matmul_f64(a, b)?
    } else {
        matmul_f32(a, b)?.cast(dtype)
    })
}

fn product_nt(a: &RealMatrix, b: &RealMatrix, dtype: DType) -> Result<RealMatrix> {
    Ok(if dtype == DType::Fp64 {
        matmul_f64_nt(a, b)?
    } else {
        matmul_f32_nt(a, b)?.cast(dtype)
    })
}

pub fn layer_forward(state: &DoraLinearState, x: &RealMatrix) -> Result<(RealMatrix, SavedForward)> {
    if x.cols() != state.d_in() {
        return Err(DoraError::shape(
            "layer_forward",
            format!("X [rows, {}]", state.d_in()),
            format!("{:?}", x.shape()),
        ));
    }
    let dt = state.working_dtype;
    let x_w = x.cast(dt);

    let w_norm = factored_row_norm(&state.w, &state.adapter, &state.chunk_plan)?;
    let g = magnitude_scale(&state.magnitude, &w_norm, dt)?;

    let base_out = product_nt(&x_w, &state.w, dt)?;
    let xa = product_nt(&x_w, &state.adapter.a, dt)?;
    let lora_out = product_nt(&xa, &state.adapter.b, dt)?;

    let decision = select_tier(&state.context(x));
    let inputs = ComposeInputs::new(&base_out, &lora_out, &g.data, state.adapter.scale)?;
    let (delta, inner) = match decision.tier {
        Tier::FusedBackward => {
            let out = dual_output_compose(&inputs, state.needs_inner(), DEFAULT_TILE_ROWS)?;
            (out.delta, out.inner)
        }
        Tier::FusedForward => (fused_compose(&inputs, DEFAULT_TILE_ROWS)?.0, None),
        Tier::Eager => {
            let delta = stable_compose(&inputs)?;
            let inner = if state.needs_inner() {
                Some(compose_inner(&inputs)?)
            } else {
                None
            };
            (delta, inner)
        }
    };

    let (rows, d_out) = base_out.shape();
    let y = RealMatrix::from_fn(rows, d_out, dt, |i, j| {
        let y0 = dt.add(base_out.get(i, j), delta.get(i, j));
        match &state.bias {
            Some(b) => dt.add(y0, b.data[j]),
            None => y0,
        }
    });

    Ok((
        y,
        SavedForward {
            x: x_w,
            xa,
            g,
            w_norm,
            inner,
            lora_out,
            base_out,
            delta,
            decision,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub d_a: RealMatrix,
    pub d_b: RealMatrix,
    pub d_mag: Option<RealVector>,
    /// Gradient the delta sends into the frozen-path output, `(g-1)·dY`.
    pub d_base_out: RealMatrix,
}

pub fn layer_backward(state: &DoraLinearState, saved: &SavedForward, dy: &RealMatrix) -> Result<LayerGrads> {
    if dy.shape() != saved.delta.shape() {
        return Err(DoraError::shape(
            "layer_backward",
            format!("dY {:?}", saved.delta.shape()),
            format!("{:?}", dy.shape()),
        ));
    }
    let dt = state.working_dtype;
    let dy = dy.cast(dt);
    let grads = compose_backward(
        &dy,
        &saved.g.data,
        state.adapter.scale,
        saved.inner.as_ref(),
        &saved.w_norm.data,
        state.magnitude_trainable,
    )?;

    // lora = xa·Bᵀ, xa = X·Aᵀ
    let d_lora_t = grads.d_lora.transpose();
    let d_b = product(&d_lora_t, &saved.xa, dt)?;
    let d_xa = product(&grads.d_lora, &state.adapter.b, dt)?;
    let d_a = product(&d_xa.transpose(), &saved.x, dt)?;

    Ok(LayerGrads {
        d_a,
        d_b,
        d_mag: grads.d_mag,
        d_base_out: grads.d_base,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::ForceMode;
    use crate::linalg::{seeded_fixture, Fixture};
    use crate::reference_oracle::{finite_difference_grads, oracle_forward, NormTreatment, DEFAULT_FD_STEP};

    fn state(d_out: usize, d_in: usize, r: usize, seed: u64, bias: bool) -> DoraLinearState {
        let dt = DType::Fp32;
        let w = seeded_fixture(Fixture::STANDARD_NORMAL, d_out, d_in, seed, dt);
        let a = seeded_fixture(Fixture::STANDARD_NORMAL, r, d_in, seed + 1, dt);
        let b = seeded_fixture(Fixture::Gaussian { mean: 0.0, std: 0.1 }, d_out, r, seed + 2, dt);
        let m = RealVector::new(dt, crate::linalg::seeded_values(Fixture::Uniform { low: 1.0, high: 3.0 }, d_out, seed + 3));
        let bias = bias.then(|| RealVector::new(dt, crate::linalg::seeded_values(Fixture::STANDARD_NORMAL, d_out, seed + 4)));
        let adapter = AdapterPair::new(a, b, 0.5).unwrap();
        DoraLinearState::new(w, bias, adapter, Magnitude::new(m).unwrap(), dt).unwrap()
    }

    fn input(rows: usize, d_in: usize, seed: u64) -> RealMatrix {
        seeded_fixture(Fixture::STANDARD_NORMAL, rows, d_in, seed, DType::Fp32)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn init_is_plain_linear() {
        let mut st = state(8, 6, 2, 1, true);
        st.adapter.b = RealMatrix::zeros(8, 2, DType::Fp32);
        let plan = st.chunk_plan;
        let norms = factored_row_norm(&st.w, &st.adapter, &plan).unwrap();
        st.magnitude = Magnitude::new(norms).unwrap();
        let x = input(5, 6, 9);
        let (y, saved) = layer_forward(&st, &x).unwrap();
        assert!(saved.g.data.iter().all(|&g| g == 1.0));
        assert_eq!(saved.delta.max_abs(), 0.0);
        let bias = st.bias.as_ref().unwrap();
        let want = RealMatrix::from_fn(5, 8, DType::Fp32, |i, j| {
            DType::Fp32.add(saved.base_out.get(i, j), bias.data[j])
        });
        assert!(y.bitwise_eq(&want));
    }

    #[test]
    fn forward_matches_oracle() {
        let st = state(40, 24, 4, 3, true);
        let x = input(7, 24, 4);
        let (y, _) = layer_forward(&st, &x).unwrap();
        let want = oracle_forward(&x, &st.w, st.bias.as_ref(), &st.adapter, &st.magnitude).unwrap();
        assert!(rel_err(y.data(), want.data()) <= 1e-5);
    }

    #[test]
    fn tiers_agree_bitwise() {
        let mut st = state(256, 64, 8, 5, true);
        let x = input(16, 64, 6);
        let dy = input(16, 256, 7);

        st.dispatch.force_fused_backward = ForceMode::On;
        let (y1, s1) = layer_forward(&st, &x).unwrap();
        assert_eq!(s1.decision.tier, Tier::FusedBackward);
        let g1 = layer_backward(&st, &s1, &dy).unwrap();

        st.dispatch.force_fused_backward = ForceMode::Auto;
        let (y3, s3) = layer_forward(&st, &x).unwrap();
        assert_eq!(s3.decision.tier, Tier::Eager);
        let g3 = layer_backward(&st, &s3, &dy).unwrap();

        st.dispatch.requires_grad = false;
        st.dispatch.training = false;
        let (y2, s2) = layer_forward(&st, &x).unwrap();
        assert_eq!(s2.decision.tier, Tier::FusedForward);
        assert!(s2.inner.is_none());

        assert!(y1.bitwise_eq(&y3) && y2.bitwise_eq(&y3));
        assert!(g1.d_a.bitwise_eq(&g3.d_a));
        assert!(g1.d_b.bitwise_eq(&g3.d_b));
        assert!(g1.d_mag.unwrap().bitwise_eq(&g3.d_mag.unwrap()));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let st = state(8, 6, 2, 8, false);
        let x = input(3, 6, 9);
        let (_, saved) = layer_forward(&st, &x).unwrap();
        let g = layer_backward(&st, &saved, &RealMatrix::zeros(3, 8, DType::Fp32)).unwrap();
        assert_eq!(g.d_a.max_abs() + g.d_b.max_abs() + g.d_mag.unwrap().data.iter().map(|v| v.abs()).sum::<f64>(), 0.0);
    }

    #[test]
    fn frozen_magnitude_skips_inner() {
        let mut st = state(8, 6, 2, 10, false);
        st.magnitude_trainable = false;
        let x = input(3, 6, 11);
        for force in [ForceMode::On, ForceMode::Off] {
            st.dispatch.force_fused_backward = force;
            let (_, saved) = layer_forward(&st, &x).unwrap();
            assert!(saved.inner.is_none());
            let g = layer_backward(&st, &saved, &input(3, 8, 12)).unwrap();
            assert!(g.d_mag.is_none());
        }
    }

    #[test]
    fn gradients_match_detached_finite_differences() {
        for seed in 0..5u64 {
            let st = state(8, 6, 2, 100 + 10 * seed, seed % 2 == 0);
            let x = input(3, 6, 200 + seed);
            let (y, saved) = layer_forward(&st, &x).unwrap();
            let ones = RealMatrix::filled(y.rows(), y.cols(), DType::Fp32, 1.0);
            let got = layer_backward(&st, &saved, &ones).unwrap();
            let fd = finite_difference_grads(
                &x,
                &st.w,
                &st.adapter,
                &st.magnitude,
                NormTreatment::Detached(&saved.w_norm.data),
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(rel_err(got.d_a.data(), fd.d_a.data()) <= 1e-3);
            assert!(rel_err(got.d_b.data(), fd.d_b.data()) <= 1e-3);
            assert!(rel_err(&got.d_mag.unwrap().data, &fd.d_mag.data) <= 1e-3);
        }
    }

    #[test]
    fn gradients_ignore_the_norm_dependency() {
        let mut st = state(8, 6, 2, 300, false);
        st.adapter.b = seeded_fixture(Fixture::STANDARD_NORMAL, 8, 2, 301, DType::Fp32);
        let x = input(3, 6, 302);
        let (y, saved) = layer_forward(&st, &x).unwrap();
        let ones = RealMatrix::filled(y.rows(), y.cols(), DType::Fp32, 1.0);
        let got = layer_backward(&st, &saved, &ones).unwrap();
        let live = finite_difference_grads(&x, &st.w, &st.adapter, &st.magnitude, NormTreatment::Live, DEFAULT_FD_STEP).unwrap();
        assert!(rel_err(got.d_b.data(), live.d_b.data()) > 1e-2);
        assert!(rel_err(got.d_a.data(), live.d_a.data()) > 1e-2);
    }

    #[test]
    fn norm_is_recomputed_each_forward() {
        let mut st = state(8, 6, 2, 20, false);
        let x = input(3, 6, 21);
        let (_, first) = layer_forward(&st, &x).unwrap();
        st.w.set(0, 0, st.w.get(0, 0) + 1.0);
        let (_, second) = layer_forward(&st, &x).unwrap();
        assert_ne!(first.w_norm.data[0], second.w_norm.data[0]);
    }

    #[test]
    fn bias_is_added_after_compose() {
        let with = state(16, 6, 2, 30, true);
        let mut without = with.clone();
        without.bias = None;
        let x = input(4, 6, 31);
        let (yb, sb) = layer_forward(&with, &x).unwrap();
        let (y0, s0) = layer_forward(&without, &x).unwrap();
        assert!(sb.delta.bitwise_eq(&s0.delta));
        assert!(sb.w_norm.bitwise_eq(&s0.w_norm));
        let b = with.bias.as_ref().unwrap();
        let want = RealMatrix::from_fn(4, 16, DType::Fp32, |i, j| DType::Fp32.add(y0.get(i, j), b.data[j]));
        assert!(yb.bitwise_eq(&want));
    }

    #[test]
    fn strided_input_routes_to_eager() {
        let st = state(256, 8, 2, 40, false);
        let x = input(4, 8, 41).as_strided_view();
        let (_, saved) = layer_forward(&st, &x).unwrap();
        assert_eq!(saved.decision.tier, Tier::Eager);
        assert!(saved.decision.reasons.contains(&crate::dispatch::Reason::NonContiguous));
    }

    #[test]
    fn shape_errors() {
        let st = state(8, 6, 2, 50, false);
        assert!(layer_forward(&st, &input(3, 5, 51)).is_err());
        let (_, saved) = layer_forward(&st, &input(3, 6, 52)).unwrap();
        assert!(layer_backward(&st, &saved, &input(3, 7, 53)).is_err());
    }
}

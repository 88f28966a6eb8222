use super::{backward::tolerance as grad_tolerance, case, case_seed, normwise_rel_err, run_cases, SuiteOutput};
use crate::config::{RunConfig, ShapeSet};
use crate::timing::time_kernel;
use anyhow::Result;
use dorafactor_core::dispatch::{ForceMode, Tier};
use dorafactor_core::dora_layer::{layer_backward, layer_forward, DoraLinearState, LayerGrads};
use dorafactor_core::factored_norm::{AdapterPair, Magnitude};
use dorafactor_core::linalg::{derive_seed, seeded_fixture, seeded_values, Fixture, RealMatrix, RealVector};
use dorafactor_core::memory_model::REFERENCE_NORM_SHAPES;
use dorafactor_core::reference_oracle::{finite_difference_grads, oracle_forward, NormTreatment, DEFAULT_FD_STEP};
use dorafactor_core::DType;
use serde::Serialize;
use serde_json::json;

/// Live-norm gradients must differ from the detached ones by at least this.
const DETACH_MIN_DIFF: f64 = 1e-2;
const CORE_SHAPES: [(usize, usize, usize, usize); 5] = [(6, 8, 2, 3), (5, 7, 1, 4), (12, 16, 3, 2), (9, 128, 4, 5), (16, 256, 8, 6)];

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LayerSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub rows: usize,
    pub bias: bool,
    pub dtype: DType,
    pub finite_differences: bool,
    /// `B ~ N(0, 1)` and compare against live-norm differences instead.
    pub detachment_probe: bool,
}

pub fn specs(cfg: &RunConfig) -> Vec<LayerSpec> {
    let dtype = cfg.dtype.unwrap_or(DType::Fp32);
    let spec = |(d_in, d_out, r, rows): (usize, usize, usize, usize), bias, fd| LayerSpec {
        d_in,
        d_out,
        rank: cfg.rank.unwrap_or(r),
        rows,
        bias,
        dtype,
        finite_differences: fd,
        detachment_probe: false,
    };
    let mut v = Vec::new();
    match cfg.shapes {
        ShapeSet::Core | ShapeSet::Extended => {
            for _repeat in 0..3 {
                for shape in CORE_SHAPES {
                    for bias in [false, true] {
                        v.push(spec(shape, bias, true));
                    }
                }
            }
            for shape in [CORE_SHAPES[0], CORE_SHAPES[2]] {
                v.push(LayerSpec {
                    detachment_probe: true,
                    ..spec(shape, false, true)
                });
            }
            if cfg.shapes == ShapeSet::Extended {
                for shape in [(64, 512, 16, 32), (128, 1024, 32, 64), (1024, 384, 64, 16)] {
                    v.push(spec(shape, true, false));
                }
            }
        }
        ShapeSet::Table6 => {
            for &(d_out, d_in, r) in &REFERENCE_NORM_SHAPES {
                let shape = (cfg.desk(d_in), cfg.desk(d_out), cfg.desk(r), cfg.desk(1024));
                v.push(spec(shape, true, false));
            }
        }
    }
    v
}

fn build_state(cfg: &RunConfig, spec: &LayerSpec, seed: u64) -> Result<DoraLinearState> {
    let dt = spec.dtype;
    let s = |k| derive_seed(seed, k);
    let w = seeded_fixture(Fixture::STANDARD_NORMAL, spec.d_out, spec.d_in, s(0), dt);
    let a = seeded_fixture(Fixture::STANDARD_NORMAL, spec.rank, spec.d_in, s(1), dt);
    let b_std = if spec.detachment_probe { 1.0 } else { 0.1 };
    let b = seeded_fixture(Fixture::Gaussian { mean: 0.0, std: b_std }, spec.d_out, spec.rank, s(2), dt);
    let m = RealVector::new(dt, seeded_values(Fixture::Uniform { low: 1.0, high: 3.0 }, spec.d_out, s(3)));
    let m = RealVector::new(dt, m.data.iter().map(|&v| dt.round(v)).collect());
    let bias = spec
        .bias
        .then(|| RealVector::new(dt, seeded_values(Fixture::STANDARD_NORMAL, spec.d_out, s(4)).iter().map(|&v| dt.round(v)).collect()));
    let scale = 2.0 / (spec.rank as f64).sqrt();
    let mut st = DoraLinearState::new(w, bias, AdapterPair::new(a, b, scale)?, Magnitude::new(m)?, dt)?
        .with_chunk_budget(cfg.chunk_budget_bytes())?;
    st.dispatch.force_fused = cfg.fused;
    st.dispatch.force_fused_backward = cfg.fused_backward;
    Ok(st)
}

fn forward_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::Fp64 | DType::Fp32 => 1e-5,
        half => 4.0 * half.ulp_at_one(),
    }
}

fn grads_bitwise_eq(a: &LayerGrads, b: &LayerGrads) -> bool {
    let mag = match (&a.d_mag, &b.d_mag) {
        (Some(x), Some(y)) => x.bitwise_eq(y),
        (None, None) => true,
        _ => false,
    };
    a.d_a.bitwise_eq(&b.d_a) && a.d_b.bitwise_eq(&b.d_b) && mag && a.d_base_out.bitwise_eq(&b.d_base_out)
}

fn evaluate(cfg: &RunConfig, index: usize, spec: &LayerSpec) -> Result<crate::artifact::Case> {
    let seed = case_seed(cfg, index);
    let dt = spec.dtype;
    let st = build_state(cfg, spec, seed)?;
    let x = seeded_fixture(Fixture::STANDARD_NORMAL, spec.rows, spec.d_in, derive_seed(seed, 10), dt);
    let dy = seeded_fixture(Fixture::STANDARD_NORMAL, spec.rows, spec.d_out, derive_seed(seed, 11), dt);

    let (y, saved) = layer_forward(&st, &x)?;
    let want = oracle_forward(&x, &st.w, st.bias.as_ref(), &st.adapter, &st.magnitude)?;
    let forward_err = normwise_rel_err(y.data(), want.data());
    let forward_ok = forward_err <= forward_tolerance(dt);

    // finite differences of sum(Y), so the upstream gradient is all ones
    let mut fd = json!(null);
    let mut fd_ok = true;
    let mut detach_ok = true;
    if spec.finite_differences {
        let ones = RealMatrix::filled(spec.rows, spec.d_out, dt, 1.0);
        let got = layer_backward(&st, &saved, &ones)?;
        let treatment = if spec.detachment_probe {
            NormTreatment::Live
        } else {
            NormTreatment::Detached(&saved.w_norm.data)
        };
        let oracle = finite_difference_grads(&x, &st.w, &st.adapter, &st.magnitude, treatment, DEFAULT_FD_STEP)?;
        let e_a = normwise_rel_err(got.d_a.data(), oracle.d_a.data());
        let e_b = normwise_rel_err(got.d_b.data(), oracle.d_b.data());
        let e_m = got
            .d_mag
            .as_ref()
            .map_or(0.0, |d| normwise_rel_err(&d.data, &oracle.d_mag.data));
        if spec.detachment_probe {
            detach_ok = e_a > DETACH_MIN_DIFF && e_b > DETACH_MIN_DIFF;
        } else {
            let tol = grad_tolerance(dt);
            fd_ok = e_a <= tol && e_b <= tol && e_m <= tol;
        }
        fd = json!({ "d_a_rel_err": e_a, "d_b_rel_err": e_b, "d_mag_rel_err": e_m, "live_norm": spec.detachment_probe });
    }

    // same numbers whichever tier runs
    let mut tiers = Vec::new();
    let mut runs = Vec::new();
    for mode in [ForceMode::On, ForceMode::Off] {
        let mut s = st.clone();
        s.dispatch.force_fused = ForceMode::Auto;
        s.dispatch.force_fused_backward = mode;
        let (yt, sv) = layer_forward(&s, &x)?;
        let gt = layer_backward(&s, &sv, &dy)?;
        tiers.push(sv.decision.tier.number());
        runs.push((yt, gt));
    }
    let mut inference = st.clone();
    inference.dispatch.training = false;
    inference.dispatch.requires_grad = false;
    let (y_inf, s_inf) = layer_forward(&inference, &x)?;
    tiers.push(s_inf.decision.tier.number());
    let tier_ok = runs[0].0.bitwise_eq(&runs[1].0) && y_inf.bitwise_eq(&runs[1].0) && grads_bitwise_eq(&runs[0].1, &runs[1].1);

    let bias_ok = match &st.bias {
        Some(b) => {
            let mut plain = st.clone();
            plain.bias = None;
            let (y0, s0) = layer_forward(&plain, &x)?;
            let expect = RealMatrix::from_fn(y0.rows(), y0.cols(), dt, |i, j| dt.add(y0.get(i, j), b.data[j]));
            s0.delta.bitwise_eq(&saved.delta) && y.bitwise_eq(&expect)
        }
        None => true,
    };

    let mut bumped = st.clone();
    bumped.w.set(0, 0, dt.round(bumped.w.get(0, 0) + 1.0));
    let fresh_ok = layer_forward(&bumped, &x)?.1.w_norm.data[0] != saved.w_norm.data[0];

    // m equal to the current norm makes g exactly one
    let mut unit = st.clone();
    unit.magnitude = Magnitude::new(saved.w_norm.clone())?;
    let (_, su) = layer_forward(&unit, &x)?;
    let gu = layer_backward(&unit, &su, &dy)?;
    let unit_g = su.g.data.iter().all(|&g| g == 1.0);
    let d_base_zero = gu.d_base_out.max_abs() == 0.0;

    let pass = forward_ok && fd_ok && detach_ok && tier_ok && bias_ok && fresh_ok && unit_g && d_base_zero;
    let outputs = json!({
        "forward_rel_err": forward_err,
        "forward_tolerance": forward_tolerance(dt),
        "gradients": fd,
        "gradient_tolerance": grad_tolerance(dt),
        "tier": saved.decision.tier.number(),
        "reasons": saved.decision.reasons,
        "tiers_checked": tiers,
        "tier_invariant": tier_ok,
        "bias_neutral": bias_ok,
        "norm_fresh": fresh_ok,
        "unit_g_d_base_zero": unit_g && d_base_zero,
        "detached": detach_ok,
        "chunks": st.chunk_plan.num_chunks,
    });
    let id = format!(
        "{}/{}x{}r{}n{}{}#{index}",
        if spec.detachment_probe { "detach" } else { "layer" },
        spec.d_out,
        spec.d_in,
        spec.rank,
        spec.rows,
        if spec.bias { "+bias" } else { "" },
    );
    Ok(case(id, seed, spec, outputs, pass))
}

pub(crate) fn run(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<SuiteOutput> {
    let specs = specs(cfg);
    let cases = run_cases(pool, &specs, |i, s| evaluate(cfg, i, s))?;
    let gradient_instances = specs.iter().filter(|s| s.finite_differences && !s.detachment_probe).count();
    let fused_backward_seen = cases
        .iter()
        .filter(|c| c.outputs["tiers_checked"].as_array().is_some_and(|t| t.first() == Some(&json!(Tier::FusedBackward.number()))))
        .count();
    let metrics = json!({
        "instances": cases.len(),
        "gradient_instances": gradient_instances,
        "fused_backward_instances": fused_backward_seen,
    });

    let timed = specs.iter().max_by_key(|s| s.d_in * s.d_out).copied();
    let mut kernels = Vec::new();
    if let Some(spec) = timed {
        let st = build_state(cfg, &spec, cfg.seed)?;
        let x = seeded_fixture(Fixture::STANDARD_NORMAL, spec.rows, spec.d_in, cfg.seed, spec.dtype);
        kernels.push(time_kernel("layer_forward", cfg.repeats, cfg.warmup, || layer_forward(&st, &x)));
    }
    Ok(SuiteOutput { cases, metrics, kernels })
}

use super::{case, case_seed, normwise_rel_err, run_cases, SuiteOutput};
use crate::config::{RunConfig, ShapeSet};
use crate::timing::time_kernel;
use anyhow::Result;
use dorafactor_core::compose::{compose_backward, compose_inner, stable_compose, ComposeInputs};
use dorafactor_core::factored_norm::{magnitude_scale, Magnitude};
use dorafactor_core::linalg::{derive_seed, fixture_rng, seeded_fixture, seeded_values, Fixture, RealMatrix, RealVector};
use dorafactor_core::memory_model::REFERENCE_NORM_SHAPES;
use dorafactor_core::DType;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

/// Coordinates differenced per tensor; larger tensors are subsampled.
const MAX_PROBES: usize = 48;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BackwardSpec {
    pub rows: usize,
    pub d_out: usize,
    pub dtype: DType,
    pub scale: f64,
}

pub fn specs(cfg: &RunConfig) -> Vec<BackwardSpec> {
    let dtype = cfg.dtype.unwrap_or(DType::Fp32);
    let grid = |dims: &[usize]| {
        let mut v = Vec::new();
        for &rows in dims {
            for &d_out in dims {
                for scale in [0.5, 1.0, 2.0] {
                    v.push(BackwardSpec { rows, d_out, dtype, scale });
                }
            }
        }
        v
    };
    match cfg.shapes {
        ShapeSet::Core => grid(&[3, 8, 64]),
        ShapeSet::Extended => grid(&[3, 8, 64, 257]),
        ShapeSet::Table6 => REFERENCE_NORM_SHAPES
            .iter()
            .map(|&(d_out, _, _)| BackwardSpec {
                rows: cfg.desk(1024),
                d_out: cfg.desk(d_out),
                dtype,
                scale: 1.0,
            })
            .collect(),
    }
}

pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::Fp64 | DType::Fp32 => 1e-3,
        DType::Fp16 => 1e-2,
        DType::Bf16 => 5e-2,
    }
}

struct Instance {
    base: RealMatrix,
    lora: RealMatrix,
    dy: RealMatrix,
    w_norm: RealVector,
    m: Magnitude,
}

fn instance(spec: &BackwardSpec, seed: u64) -> Result<Instance> {
    let dt = spec.dtype;
    let fx = |rows, cols, k| seeded_fixture(Fixture::STANDARD_NORMAL, rows, cols, derive_seed(seed, k), dt);
    let w_norm = RealVector::new(dt, seeded_values(Fixture::Uniform { low: 0.5, high: 2.0 }, spec.d_out, derive_seed(seed, 3)));
    let g = seeded_values(Fixture::Gaussian { mean: 1.0, std: 0.05 }, spec.d_out, derive_seed(seed, 4));
    let m = Magnitude::new(RealVector::new(dt, w_norm.data.iter().zip(&g).map(|(w, g)| w * g).collect()))?;
    Ok(Instance {
        base: fx(spec.rows, spec.d_out, 0),
        lora: fx(spec.rows, spec.d_out, 1),
        dy: fx(spec.rows, spec.d_out, 2),
        w_norm,
        m,
    })
}

/// `Σ dy ⊙ delta` with `g = m / max(w_norm, eps)`, all in fp64.
fn loss(inst: &Instance, base: &RealMatrix, lora: &RealMatrix, m: &Magnitude, scale: f64) -> Result<f64> {
    let g = magnitude_scale(m, &inst.w_norm, DType::Fp64)?;
    let (base, lora) = (base.cast(DType::Fp64), lora.cast(DType::Fp64));
    let d = stable_compose(&ComposeInputs::new(&base, &lora, &g.data, scale)?)?;
    Ok(d.data().iter().zip(inst.dy.data()).map(|(a, b)| a * b).sum())
}

fn probes(len: usize, seed: u64) -> Vec<usize> {
    if len <= MAX_PROBES {
        return (0..len).collect();
    }
    let mut rng = fixture_rng(seed);
    (0..MAX_PROBES).map(|_| rng.random_range(0..len)).collect()
}

fn step(theta: f64) -> f64 {
    1e-3 * theta.abs().max(1.0)
}

pub(crate) fn run(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<SuiteOutput> {
    let specs = specs(cfg);
    let cases = run_cases(pool, &specs, |i, spec| {
        let seed = case_seed(cfg, i);
        let inst = instance(spec, seed)?;
        let s = spec.scale;
        let g = magnitude_scale(&inst.m, &inst.w_norm, spec.dtype)?;
        let inputs = ComposeInputs::new(&inst.base, &inst.lora, &g.data, s)?;
        let inner = compose_inner(&inputs)?;
        let grads = compose_backward(&inst.dy, &g.data, s, Some(&inner), &inst.w_norm.data, true)?;
        let d_mag = grads.d_mag.as_ref().expect("requested");

        let fd_matrix = |which: usize| -> Result<(Vec<f64>, Vec<f64>)> {
            let (src, analytic) = if which == 0 { (&inst.lora, &grads.d_lora) } else { (&inst.base, &grads.d_base) };
            let (mut got, mut want) = (Vec::new(), Vec::new());
            for idx in probes(src.len(), derive_seed(seed, 10 + which as u64)) {
                let (r, c) = (idx / spec.d_out, idx % spec.d_out);
                let theta = src.get(r, c);
                let mut plus = src.cast(DType::Fp64);
                let mut minus = plus.clone();
                plus.set(r, c, theta + step(theta));
                minus.set(r, c, theta - step(theta));
                let (lp, lm) = if which == 0 {
                    (loss(&inst, &inst.base, &plus, &inst.m, s)?, loss(&inst, &inst.base, &minus, &inst.m, s)?)
                } else {
                    (loss(&inst, &plus, &inst.lora, &inst.m, s)?, loss(&inst, &minus, &inst.lora, &inst.m, s)?)
                };
                want.push((lp - lm) / (2.0 * step(theta)));
                got.push(analytic.get(r, c));
            }
            Ok((got, want))
        };
        let (lora_got, lora_fd) = fd_matrix(0)?;
        let (base_got, base_fd) = fd_matrix(1)?;
        let mut mag_fd = Vec::with_capacity(spec.d_out);
        for j in 0..spec.d_out {
            let theta = inst.m.values().data[j];
            let bumped = |delta: f64| -> Result<f64> {
                let mut v = inst.m.values().data.clone();
                v[j] = theta + delta;
                loss(&inst, &inst.base, &inst.lora, &Magnitude::new(RealVector::new(DType::Fp64, v))?, s)
            };
            mag_fd.push((bumped(step(theta))? - bumped(-step(theta))?) / (2.0 * step(theta)));
        }

        let unit = compose_backward(&inst.dy, &vec![1.0; spec.d_out], s, None, &inst.w_norm.data, false)?;
        let unit_g_d_base_zero = unit.d_base.data().iter().all(|v| *v == 0.0);

        let errs = [
            normwise_rel_err(&lora_got, &lora_fd),
            normwise_rel_err(&base_got, &base_fd),
            normwise_rel_err(&d_mag.data, &mag_fd),
        ];
        let tol = tolerance(spec.dtype);
        let pass = errs.iter().all(|e| *e <= tol) && unit_g_d_base_zero;
        let outputs = json!({
            "d_lora_rel_err": errs[0],
            "d_base_rel_err": errs[1],
            "d_mag_rel_err": errs[2],
            "tolerance": tol,
            "probes_per_tensor": lora_got.len(),
            "unit_g_d_base_zero": unit_g_d_base_zero,
        });
        Ok(case(format!("{}x{}-s{}", spec.rows, spec.d_out, spec.scale), seed, spec, outputs, pass))
    })?;

    let worst = |key: &str| cases.iter().map(|c| c.outputs[key].as_f64().unwrap_or(f64::NAN)).fold(0.0, f64::max);
    let metrics = json!({
        "instances": cases.len(),
        "worst_d_lora_rel_err": worst("d_lora_rel_err"),
        "worst_d_base_rel_err": worst("d_base_rel_err"),
        "worst_d_mag_rel_err": worst("d_mag_rel_err"),
    });

    let spec = BackwardSpec { rows: cfg.desk(4096), d_out: cfg.desk(4096), dtype: cfg.dtype.unwrap_or(DType::Fp32), scale: 1.0 };
    let inst = instance(&spec, cfg.seed)?;
    let g = magnitude_scale(&inst.m, &inst.w_norm, spec.dtype)?;
    let inner = compose_inner(&ComposeInputs::new(&inst.base, &inst.lora, &g.data, 1.0)?)?;
    let kernels = vec![time_kernel("compose_backward", cfg.repeats, cfg.warmup, || {
        compose_backward(&inst.dy, &g.data, 1.0, Some(&inner), &inst.w_norm.data, true)
    })];
    Ok(SuiteOutput { cases, metrics, kernels })
}

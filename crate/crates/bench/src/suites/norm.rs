use super::{case, case_seed, run_cases, SuiteOutput};
use crate::config::{RunConfig, ShapeSet};
use crate::timing::time_kernel;
use anyhow::Result;
use dorafactor_core::factored_norm::{factored_row_norm, AdapterPair};
use dorafactor_core::linalg::{derive_seed, plan_chunks, seeded_fixture, Fixture, RealMatrix};
use dorafactor_core::memory_model::{dense_baseline_bytes, factored_transient_bytes, theoretical_reduction, REFERENCE_NORM_SHAPES};
use dorafactor_core::reference_oracle::{dense_ba_norm, peft_identity_norm};
use dorafactor_core::DType;
use serde::Serialize;
use serde_json::json;

pub const GRID_DIMS: [usize; 5] = [3, 17, 64, 96, 257];
pub const GRID_RANKS: [usize; 4] = [1, 2, 8, 33];

#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub scale: f64,
    pub dtype: DType,
    /// Full-size shape this case was scaled down from, if any.
    pub full_shape: Option<(usize, usize, usize)>,
}

fn scales(rank: usize) -> [f64; 3] {
    [0.0, 1.0, 2.0 / (rank as f64).sqrt()]
}

pub fn specs(cfg: &RunConfig) -> Vec<NormSpec> {
    let dtype = cfg.dtype.unwrap_or(DType::Fp32);
    let mut out = Vec::new();
    let grid = |out: &mut Vec<NormSpec>, dims: &[usize], ranks: &[usize]| {
        for &d_out in dims {
            for &d_in in dims {
                for &r in ranks {
                    let rank = cfg.rank.unwrap_or(r);
                    for scale in scales(rank) {
                        out.push(NormSpec { d_out, d_in, rank, scale, dtype, full_shape: None });
                    }
                }
            }
        }
    };
    match cfg.shapes {
        ShapeSet::Core => grid(&mut out, &GRID_DIMS, &GRID_RANKS),
        ShapeSet::Extended => {
            grid(&mut out, &GRID_DIMS, &GRID_RANKS);
            grid(&mut out, &[512, 1024], &[16, 64]);
        }
        ShapeSet::Table6 => {
            for &(d_out, d_in, r) in &REFERENCE_NORM_SHAPES {
                let rank = cfg.rank.unwrap_or(r);
                out.push(NormSpec {
                    d_out: cfg.desk(d_out),
                    d_in: cfg.desk(d_in),
                    rank: cfg.desk(rank),
                    scale: 2.0 / (rank as f64).sqrt(),
                    dtype,
                    full_shape: Some((d_out, d_in, rank)),
                });
            }
        }
    }
    out
}

/// Largest tolerated per-row relative error for a result stored in `dtype`.
pub fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::Fp64 | DType::Fp32 => 1e-5,
        half => half.ulp_at_one(),
    }
}

fn instance(spec: &NormSpec, seed: u64) -> Result<(RealMatrix, AdapterPair)> {
    let w = seeded_fixture(Fixture::STANDARD_NORMAL, spec.d_out, spec.d_in, derive_seed(seed, 0), spec.dtype);
    let a = seeded_fixture(Fixture::STANDARD_NORMAL, spec.rank, spec.d_in, derive_seed(seed, 1), spec.dtype);
    let b = seeded_fixture(Fixture::STANDARD_NORMAL, spec.d_out, spec.rank, derive_seed(seed, 2), spec.dtype);
    Ok((w, AdapterPair::new(a, b, spec.scale)?))
}

pub(crate) fn run(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<SuiteOutput> {
    let specs = specs(cfg);
    let budget = cfg.chunk_budget_bytes();
    let cases = run_cases(pool, &specs, |i, spec| {
        let seed = case_seed(cfg, i);
        let (w, adapter) = instance(spec, seed)?;
        let plan = plan_chunks(spec.d_out, spec.d_in, budget)?;
        let got = factored_row_norm(&w, &adapter, &plan)?;
        let exact = dense_ba_norm(&w.cast(DType::Fp64), &adapter)?.w_norm;
        let dense = dense_ba_norm(&w, &adapter)?;
        let peft = peft_identity_norm(&w, &adapter)?;
        let max_rel_err = got
            .data
            .iter()
            .zip(&exact.data)
            .map(|(g, e)| if *e == 0.0 { g.abs() } else { (g - e).abs() / e.abs() })
            .fold(0.0, f64::max);
        let tol = tolerance(spec.dtype);
        let identity_matches_dense = peft.w_norm.bitwise_eq(&dense.w_norm);
        let (full_out, full_in, full_rank) = spec.full_shape.unwrap_or((spec.d_out, spec.d_in, spec.rank));
        let full_plan = plan_chunks(full_out, full_in, budget)?;
        let outputs = json!({
            "max_rel_err": max_rel_err,
            "tolerance": tol,
            "identity_matches_dense": identity_matches_dense,
            "chunk_size": plan.chunk_size,
            "num_chunks": plan.num_chunks,
            "theory_ratio": theoretical_reduction(full_out, full_in, full_rank),
            "factored_transient_bytes": factored_transient_bytes(&full_plan, full_out, full_rank, spec.scale == 0.0, spec.dtype != DType::Fp32).transient_bytes,
            "dense_transient_bytes": dense_baseline_bytes(full_out, full_in, spec.dtype, true).transient_bytes,
        });
        let pass = max_rel_err <= tol && identity_matches_dense;
        let id = format!("{}x{}r{}s{:.4}", spec.d_out, spec.d_in, spec.rank, spec.scale);
        Ok(case(id, seed, spec, outputs, pass))
    })?;

    let worst = cases
        .iter()
        .map(|c| c.outputs["max_rel_err"].as_f64().unwrap_or(f64::NAN))
        .fold(0.0, f64::max);
    let metrics = json!({ "instances": cases.len(), "worst_rel_err": worst });

    let largest = specs.iter().max_by_key(|s| s.d_out * s.d_in).copied().expect("non-empty shape set");
    let (w, adapter) = instance(&largest, cfg.seed)?;
    let plan = plan_chunks(largest.d_out, largest.d_in, budget)?;
    let kernels = vec![
        time_kernel("factored_row_norm", cfg.repeats, cfg.warmup, || factored_row_norm(&w, &adapter, &plan)),
        time_kernel("dense_ba_norm", cfg.repeats, cfg.warmup, || dense_ba_norm(&w, &adapter)),
    ];
    Ok(SuiteOutput { cases, metrics, kernels })
}

use super::{case, SuiteOutput};
use crate::config::{RunConfig, ShapeSet};
use crate::timing::time_kernel;
use anyhow::Result;
use dorafactor_core::linalg::derive_seed;
use dorafactor_core::stability_lab::{cancellation_sweep, collapse_fractions, sample_g, GModel, SweepConfig};
use dorafactor_core::DType;
use serde_json::{json, Map, Value};

pub const COLLAPSE_SAMPLES: usize = 1_000_000;
pub const COLLAPSE_STD: f64 = 0.0015;
pub const MIN_PEAK_RATIO: f64 = 2.0;

/// Accepted collapse-fraction band per dtype; fp32 is reported only.
pub fn collapse_band(dtype: DType) -> Option<(f64, f64)> {
    match dtype {
        DType::Bf16 => Some((0.95, 1.0)),
        DType::Fp16 => Some((0.15, 0.35)),
        _ => None,
    }
}

fn sweep_config(cfg: &RunConfig, dtype: DType) -> SweepConfig {
    let mut sc = SweepConfig {
        dtype,
        seed: derive_seed(cfg.seed, dtype as u64),
        ..SweepConfig::default()
    };
    match cfg.shapes {
        ShapeSet::Core => {}
        ShapeSet::Extended => sc.d_out = 4096,
        ShapeSet::Table6 => {
            sc.rows = cfg.desk(4096).max(1);
            sc.d_out = cfg.desk(8192).max(1);
        }
    }
    sc
}

pub(crate) fn run(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<SuiteOutput> {
    let mut cases = Vec::new();
    let mut metrics = Map::new();

    let g_seed = derive_seed(cfg.seed, 0xC011);
    let g = sample_g(&GModel::Gaussian { mean: 1.0, std: COLLAPSE_STD }, COLLAPSE_SAMPLES, g_seed)?;
    let collapse_dtypes = [DType::Bf16, DType::Fp16, DType::Fp32];
    for f in collapse_fractions(&g, &collapse_dtypes) {
        let band = collapse_band(f.dtype);
        let pass = band.is_none_or(|(lo, hi)| (lo..=hi).contains(&f.fraction));
        metrics.insert(format!("collapse_fraction_{}", f.dtype.name()), json!(f.fraction));
        cases.push(case(
            format!("collapse/{}", f.dtype.name()),
            g_seed,
            json!({ "dtype": f.dtype, "n": COLLAPSE_SAMPLES, "mean": 1.0, "std": COLLAPSE_STD }),
            json!({ "threshold": f.threshold, "fraction": f.fraction, "band": band }),
            pass,
        ));
    }

    let sweep_dtypes = match cfg.dtype {
        Some(d) => vec![d],
        None => vec![DType::Bf16, DType::Fp16],
    };
    let mut kernels = Vec::new();
    for dtype in sweep_dtypes {
        let sc = sweep_config(cfg, dtype);
        let result = pool.install(|| cancellation_sweep(&sc))?;
        let name = dtype.name();
        for p in &result.points {
            let pass = p.stable_err <= p.naive_err && p.fused_err.to_bits() == p.stable_err.to_bits();
            cases.push(case(
                format!("sweep/{name}/g={:.9}", p.g),
                p.seed,
                json!({ "dtype": dtype, "g": p.g, "rows": sc.rows, "d_out": sc.d_out, "scale": sc.scale }),
                json!({ "dtype": dtype, "g": p.g, "stable_err": p.stable_err, "naive_err": p.naive_err, "fused_err": p.fused_err }),
                pass,
            ));
        }
        if dtype.is_half() {
            cases.push(case(
                format!("sweep/{name}/peak_ratio"),
                sc.seed,
                json!({ "dtype": dtype, "points": sc.grid.len(), "rows": sc.rows, "d_out": sc.d_out }),
                json!({ "peak_stable": result.peak_stable, "peak_naive": result.peak_naive, "peak_ratio": result.peak_ratio, "min_ratio": MIN_PEAK_RATIO }),
                result.peak_ratio >= MIN_PEAK_RATIO,
            ));
        }
        metrics.insert(format!("peak_ratio_{name}"), json!(result.peak_ratio));
        metrics.insert(format!("dominance_{name}"), json!(result.dominance));
        metrics.insert(format!("parity_{name}"), json!(result.parity));

        let single = SweepConfig {
            grid: vec![1.0 + 2f64.powi(-8)],
            ..sc.clone()
        };
        kernels.push(time_kernel(&format!("sweep_point_{name}"), cfg.repeats, cfg.warmup, || {
            cancellation_sweep(&single)
        }));
    }

    Ok(SuiteOutput {
        cases,
        metrics: Value::Object(metrics),
        kernels,
    })
}

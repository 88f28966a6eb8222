use super::{case, case_seed, run_cases, SuiteOutput};
use crate::config::{RunConfig, ShapeSet};
use crate::timing::time_kernel;
use anyhow::Result;
use dorafactor_core::compose::{
    compose_inner, dual_output_compose, eager_traffic_model, fused_compose, naive_compose, stable_compose,
    ComposeInputs, TrafficReport, BLOCK_COLS,
};
use dorafactor_core::linalg::{derive_seed, fixture_rng, seeded_fixture, seeded_values, Fixture, RealMatrix};
use dorafactor_core::memory_model::REFERENCE_NORM_SHAPES;
use dorafactor_core::DType;
use rand::Rng;
use serde::Serialize;
use serde_json::json;

const TILES: [usize; 6] = [1, 7, 16, 33, 64, 100];
const DTYPES: [DType; 3] = [DType::Fp32, DType::Bf16, DType::Fp16];

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ComposeSpec {
    pub rows: usize,
    pub d_out: usize,
    pub tile_rows: usize,
    pub dtype: DType,
    pub scale: f64,
    pub g_std: f64,
}

pub fn specs(cfg: &RunConfig) -> Vec<ComposeSpec> {
    let mut rng = fixture_rng(derive_seed(cfg.seed, u64::MAX));
    let mut random = |n: usize, max_rows: usize, max_d: usize| -> Vec<ComposeSpec> {
        (0..n)
            .map(|_| ComposeSpec {
                rows: rng.random_range(1..=max_rows),
                d_out: rng.random_range(1..=max_d),
                tile_rows: TILES[rng.random_range(0..TILES.len())],
                dtype: cfg.dtype.unwrap_or(DTYPES[rng.random_range(0..DTYPES.len())]),
                scale: [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)],
                g_std: [0.0, 1e-3, 2e-2][rng.random_range(0..3)],
            })
            .collect()
    };
    match cfg.shapes {
        ShapeSet::Core => random(1000, 160, 400),
        ShapeSet::Extended => {
            let mut v = random(1000, 160, 400);
            v.extend(random(200, 1024, 2048));
            v
        }
        ShapeSet::Table6 => REFERENCE_NORM_SHAPES
            .iter()
            .map(|&(d_out, _, _)| ComposeSpec {
                rows: cfg.desk(4096),
                d_out: cfg.desk(d_out),
                tile_rows: 64,
                dtype: cfg.dtype.unwrap_or(DType::Bf16),
                scale: 1.0,
                g_std: 1e-3,
            })
            .collect(),
    }
}

fn operands(spec: &ComposeSpec, seed: u64) -> (RealMatrix, RealMatrix, Vec<f64>) {
    let base = seeded_fixture(Fixture::Gaussian { mean: 0.0, std: 4.0 }, spec.rows, spec.d_out, derive_seed(seed, 0), spec.dtype);
    let lora = seeded_fixture(Fixture::STANDARD_NORMAL, spec.rows, spec.d_out, derive_seed(seed, 1), spec.dtype);
    let g = seeded_values(Fixture::Gaussian { mean: 1.0, std: spec.g_std }, spec.d_out, derive_seed(seed, 2))
        .into_iter()
        .map(|v| v as f32 as f64)
        .collect();
    (base, lora, g)
}

/// Bytes moved by the eager model over bytes moved by the fused kernel.
pub fn byte_ratio(eager: &TrafficReport, fused: &TrafficReport) -> f64 {
    eager.bytes_total as f64 / fused.bytes_total as f64
}

pub fn traffic_ok(fused: &TrafficReport, eager: &TrafficReport) -> bool {
    let ratio = byte_ratio(eager, fused);
    fused.pass_count == 1
        && fused.activation_reads == 2
        && fused.activation_writes == 1
        && (10..=12).contains(&eager.pass_count)
        && (2.5..=4.0).contains(&ratio)
}

pub(crate) fn run(cfg: &RunConfig, pool: &rayon::ThreadPool) -> Result<SuiteOutput> {
    let specs = specs(cfg);
    let cases = run_cases(pool, &specs, |i, spec| {
        let seed = case_seed(cfg, i);
        let (base, lora, g) = operands(spec, seed);
        let inputs = ComposeInputs::new(&base, &lora, &g, spec.scale)?;
        let stable = stable_compose(&inputs)?;
        let (fused, fused_traffic) = fused_compose(&inputs, spec.tile_rows)?;
        let dual = dual_output_compose(&inputs, true, spec.tile_rows)?;
        let dual_frozen = dual_output_compose(&inputs, false, spec.tile_rows)?;
        let inner = compose_inner(&inputs)?;
        let eager = eager_traffic_model(spec.rows, spec.d_out, spec.dtype);

        let fused_equal = fused.bitwise_eq(&stable);
        let dual_equal = dual.delta.bitwise_eq(&stable) && dual_frozen.delta.bitwise_eq(&stable);
        let inner_equal = dual.inner.as_ref().is_some_and(|v| v.bitwise_eq(&inner)) && dual_frozen.inner.is_none();
        let traffic = traffic_ok(&fused_traffic, &eager);
        let outputs = json!({
            "fused_equal": fused_equal,
            "dual_equal": dual_equal,
            "inner_equal": inner_equal,
            "ragged_rows": spec.rows % spec.tile_rows != 0,
            "ragged_cols": spec.d_out % BLOCK_COLS != 0,
            "fused_traffic": fused_traffic,
            "eager_traffic": eager,
            "byte_ratio": byte_ratio(&eager, &fused_traffic),
        });
        let id = format!("{}x{}-{}-t{}", spec.rows, spec.d_out, spec.dtype, spec.tile_rows);
        Ok(case(id, seed, spec, outputs, fused_equal && dual_equal && inner_equal && traffic))
    })?;

    let count = |key: &str| cases.iter().filter(|c| c.outputs[key].as_bool() == Some(true)).count();
    let metrics = json!({
        "instances": cases.len(),
        "ragged_row_cases": count("ragged_rows"),
        "ragged_col_cases": count("ragged_cols"),
        "dtypes": DTYPES.iter().filter(|d| specs.iter().any(|s| s.dtype == **d)).collect::<Vec<_>>(),
    });

    let spec = ComposeSpec {
        rows: cfg.desk(4096),
        d_out: cfg.desk(4096),
        tile_rows: 64,
        dtype: cfg.dtype.unwrap_or(DType::Bf16),
        scale: 1.0,
        g_std: 1e-3,
    };
    let (base, lora, g) = operands(&spec, cfg.seed);
    let inputs = ComposeInputs::new(&base, &lora, &g, 1.0)?;
    let kernels = vec![
        time_kernel("stable_compose", cfg.repeats, cfg.warmup, || stable_compose(&inputs)),
        time_kernel("fused_compose", cfg.repeats, cfg.warmup, || fused_compose(&inputs, 64)),
        time_kernel("naive_compose", cfg.repeats, cfg.warmup, || naive_compose(&inputs)),
    ];
    Ok(SuiteOutput { cases, metrics, kernels })
}

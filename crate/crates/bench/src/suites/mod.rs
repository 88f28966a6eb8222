//! One module per suite. Each builds a list of case specs, evaluates them
//! (optionally in parallel; order is preserved), and times a few kernels.

use crate::artifact::{Artifact, Case, KernelTiming, Timing};
use crate::config::{RunConfig, Suite};
use anyhow::Result;
use dorafactor_core::linalg::derive_seed;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

pub mod backward;
pub mod compose;
pub mod dispatch;
pub mod layer;
pub mod memory;
pub mod norm;
pub mod stability;

pub(crate) struct SuiteOutput {
    pub cases: Vec<Case>,
    pub metrics: Value,
    pub kernels: Vec<KernelTiming>,
}

pub fn run_suite(cfg: &RunConfig) -> Result<Artifact> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.parallel).build()?;
    let out = match cfg.suite {
        Suite::Norm => norm::run(cfg, &pool)?,
        Suite::Compose => compose::run(cfg, &pool)?,
        Suite::Backward => backward::run(cfg, &pool)?,
        Suite::Dispatch => dispatch::run(cfg)?,
        Suite::Memory => memory::run(cfg)?,
        Suite::Stability => stability::run(cfg, &pool)?,
        Suite::Layer => layer::run(cfg, &pool)?,
    };
    let timing = Timing {
        repeats: cfg.repeats,
        warmup: cfg.warmup,
        kernels: out.kernels,
    };
    Ok(Artifact::new(cfg.clone(), out.cases, out.metrics, timing))
}

/// Evaluate `specs` on `pool`, keeping input order. `f` gets the case index.
pub(crate) fn run_cases<S, F>(pool: &rayon::ThreadPool, specs: &[S], f: F) -> Result<Vec<Case>>
where
    S: Sync,
    F: Fn(usize, &S) -> Result<Case> + Sync + Send,
{
    pool.install(|| specs.par_iter().enumerate().map(|(i, s)| f(i, s)).collect())
}

pub(crate) fn case_seed(cfg: &RunConfig, index: usize) -> u64 {
    derive_seed(cfg.seed, index as u64)
}

pub(crate) fn case(id: String, seed: u64, inputs: impl Serialize, outputs: impl Serialize, pass: bool) -> Case {
    Case {
        id,
        seed,
        inputs: serde_json::to_value(inputs).expect("inputs serialize"),
        outputs: serde_json::to_value(outputs).expect("outputs serialize"),
        pass,
    }
}

/// `max |a - b| / max |b|`; one number per tensor, insensitive to entries of
/// `b` that happen to be near zero.
pub(crate) fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

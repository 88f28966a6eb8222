use crate::config::RunConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub id: String,
    pub seed: u64,
    pub inputs: Value,
    pub outputs: Value,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub passed: usize,
    pub failed: usize,
    pub all_pass: bool,
    /// Suite-level statistics (peak ratios, fleet fractions, ...).
    pub metrics: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTiming {
    pub name: String,
    pub median_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

/// Wall-clock measurements. Informational only and excluded from any
/// reproducibility comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub repeats: usize,
    pub warmup: usize,
    pub kernels: Vec<KernelTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub schema: u32,
    pub suite: String,
    pub config: RunConfig,
    pub cases: Vec<Case>,
    pub summary: Summary,
    pub timing: Timing,
}

impl Artifact {
    pub fn new(config: RunConfig, cases: Vec<Case>, metrics: Value, timing: Timing) -> Self {
        let passed = cases.iter().filter(|c| c.pass).count();
        let summary = Summary {
            cases: cases.len(),
            passed,
            failed: cases.len() - passed,
            all_pass: passed == cases.len(),
            metrics,
        };
        Self {
            schema: SCHEMA_VERSION,
            suite: config.suite.name().to_string(),
            config,
            cases,
            summary,
            timing,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.summary.all_pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("artifact serializes")
    }

    /// The artifact serialized with `timing` removed: the part that must be
    /// byte-identical across replays.
    pub fn deterministic_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("artifact serializes");
        if let Value::Object(map) = &mut v {
            map.remove("timing");
        }
        serde_json::to_string_pretty(&v).expect("value serializes")
    }
}

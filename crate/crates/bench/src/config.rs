use anyhow::{bail, Result};
use clap::ValueEnum;
use dorafactor_core::dispatch::ForceMode;
use dorafactor_core::linalg::ChunkPlan;
use dorafactor_core::DType;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Norm,
    Compose,
    Backward,
    Dispatch,
    Memory,
    Stability,
    Layer,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Norm,
        Suite::Compose,
        Suite::Backward,
        Suite::Dispatch,
        Suite::Memory,
        Suite::Stability,
        Suite::Layer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Norm => "norm",
            Suite::Compose => "compose",
            Suite::Backward => "backward",
            Suite::Dispatch => "dispatch",
            Suite::Memory => "memory",
            Suite::Stability => "stability",
            Suite::Layer => "layer",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeSet {
    Core,
    Extended,
    Table6,
}

/// Everything that determines a suite's numeric output. Embedded verbatim in
/// every artifact so the run can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub suite: Suite,
    pub shapes: ShapeSet,
    pub rank: Option<usize>,
    pub dtype: Option<DType>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub fused: ForceMode,
    pub fused_backward: ForceMode,
    pub norm_chunk_mb: u64,
    pub parallel: usize,
    pub desk_scale: usize,
}

impl RunConfig {
    pub fn new(suite: Suite) -> Self {
        Self {
            suite,
            shapes: ShapeSet::Core,
            rank: None,
            dtype: None,
            repeats: 20,
            warmup: 3,
            seed: 0,
            fused: ForceMode::Auto,
            fused_backward: ForceMode::Auto,
            norm_chunk_mb: 256,
            parallel: 1,
            desk_scale: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm_chunk_mb == 0 {
            bail!("--norm-chunk-mb must be at least 1");
        }
        if self.parallel == 0 {
            bail!("--parallel must be at least 1");
        }
        if self.desk_scale == 0 {
            bail!("--desk-scale must be at least 1");
        }
        if self.rank == Some(0) {
            bail!("--rank must be at least 1");
        }
        Ok(())
    }

    pub fn chunk_budget_bytes(&self) -> u64 {
        ChunkPlan::budget_from_mb(self.norm_chunk_mb)
    }

    /// Divide a full-size dimension down to desk scale, never below 1.
    pub fn desk(&self, dim: usize) -> usize {
        (dim / self.desk_scale).max(1)
    }
}

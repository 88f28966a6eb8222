//! Three-tier composition path selection.
//!
//! | Tier | Path           | When                                            |
//! |------|----------------|-------------------------------------------------|
//! | 1    | fused backward | training, kernels usable, auto-gate or forced   |
//! | 2    | fused forward  | no gradient needed, kernels usable              |
//! | 3    | eager          | no accelerator/kernels, forced off, shape guard |
//! |      |                | failure, or below the crossover                 |
//!
//! The crossover comparisons are inclusive (`>=`).

use crate::error::{DoraError, Result};
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// `on` / `off` / `auto` switch as exposed on the command line and in the
/// environment (`1`/`0`/unset are accepted too).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForceMode {
    On,
    Off,
    #[default]
    Auto,
}

impl FromStr for ForceMode {
    type Err = DoraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "on" | "1" | "true" | "yes" => Ok(ForceMode::On),
            "off" | "0" | "false" | "no" => Ok(ForceMode::Off),
            "auto" | "" => Ok(ForceMode::Auto),
            other => Err(DoraError::Parse(format!("expected on|off|auto, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for ForceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForceMode::On => "on",
            ForceMode::Off => "off",
            ForceMode::Auto => "auto",
        })
    }
}

/// Auto-mode gate for the fused backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crossover {
    pub min_d_out: usize,
    pub min_elements: usize,
}

impl Default for Crossover {
    fn default() -> Self {
        Self {
            min_d_out: 2048,
            min_elements: 2048 * 6144,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchContext {
    pub training: bool,
    pub requires_grad: bool,
    pub accelerator_available: bool,
    pub kernels_available: bool,
    pub force_fused: ForceMode,
    pub force_fused_backward: ForceMode,
    /// Flattened batch × sequence.
    pub rows: usize,
    pub d_out: usize,
    pub contiguous: bool,
    pub mag_broadcast_last_dim: bool,
    pub d_out_divisible_128: bool,
    pub crossover: Crossover,
}

impl DispatchContext {
    /// A context in which every guard passes; callers override fields.
    pub fn accelerated(training: bool, rows: usize, d_out: usize) -> Self {
        Self {
            training,
            requires_grad: training,
            accelerator_available: true,
            kernels_available: true,
            force_fused: ForceMode::Auto,
            force_fused_backward: ForceMode::Auto,
            rows,
            d_out,
            contiguous: true,
            mag_broadcast_last_dim: true,
            d_out_divisible_128: d_out.is_multiple_of(128),
            crossover: Crossover::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    FusedBackward = 1,
    FusedForward = 2,
    Eager = 3,
}

impl Tier {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reason {
    NoAccelerator,
    NoKernels,
    ForcedOff,
    NonContiguous,
    ShapeGuard,
    DOutAlignment,
    Inference,
    Forced,
    ForcedBackwardOff,
    NotTraining,
    AboveCrossover,
    BelowCrossover,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TierDecision {
    pub tier: Tier,
    pub reasons: Vec<Reason>,
}

/// Pick the composition tier for `ctx`. Every rule that fires is listed in
/// `reasons`, so an eager decision always explains itself.
pub fn select_tier(ctx: &DispatchContext) -> TierDecision {
    let mut reasons = Vec::new();
    let guards = [
        (!ctx.accelerator_available, Reason::NoAccelerator),
        (!ctx.kernels_available, Reason::NoKernels),
        (ctx.force_fused == ForceMode::Off, Reason::ForcedOff),
        (!ctx.contiguous, Reason::NonContiguous),
        (!ctx.mag_broadcast_last_dim, Reason::ShapeGuard),
        (!ctx.d_out_divisible_128, Reason::DOutAlignment),
    ];
    reasons.extend(guards.iter().filter(|(hit, _)| *hit).map(|&(_, r)| r));
    if !reasons.is_empty() {
        return TierDecision {
            tier: Tier::Eager,
            reasons,
        };
    }

    if !ctx.requires_grad {
        return TierDecision {
            tier: Tier::FusedForward,
            reasons: vec![Reason::Inference],
        };
    }
    if !ctx.training {
        return TierDecision {
            tier: Tier::Eager,
            reasons: vec![Reason::NotTraining],
        };
    }
    let (tier, reason) = match ctx.force_fused_backward {
        ForceMode::On => (Tier::FusedBackward, Reason::Forced),
        ForceMode::Off => (Tier::Eager, Reason::ForcedBackwardOff),
        ForceMode::Auto => {
            let c = ctx.crossover;
            if ctx.d_out >= c.min_d_out && ctx.rows.saturating_mul(ctx.d_out) >= c.min_elements {
                (Tier::FusedBackward, Reason::AboveCrossover)
            } else {
                (Tier::Eager, Reason::BelowCrossover)
            }
        }
    };
    TierDecision {
        tier,
        reasons: vec![reason],
    }
}

/// Whether a magnitude of shape `magnitude` broadcasts against an activation
/// of shape `activation` purely along the activation's last dimension.
///
/// Shapes align from the right, as in NumPy broadcasting. The magnitude must
/// have exactly `activation.last()` elements, all of them on its last axis;
/// any other non-unit axis (a conv-style `[1, C, 1, 1]`) fails.
pub fn shape_guard(activation: &[usize], magnitude: &[usize]) -> bool {
    let Some(&last) = activation.last() else {
        return false;
    };
    let Some((&mag_last, leading)) = magnitude.split_last() else {
        return false;
    };
    let numel: usize = magnitude.iter().product();
    magnitude.len() <= activation.len() && mag_last == last && numel == last && leading.iter().all(|&d| d == 1)
}

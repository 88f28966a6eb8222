use super::{case, SuiteOutput};
use crate::config::RunConfig;
use crate::timing::time_kernel;
use anyhow::Result;
use dorafactor_core::dispatch::{select_tier, DispatchContext, ForceMode, Tier};
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    TrainLarge,
    TrainSmallDOut,
    TrainAtCrossover,
    TrainBelowCrossover,
    Inference,
    NoKernels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Auto,
    BackwardOn,
    BackwardOff,
    FusedOff,
}

const REGIMES: [Regime; 6] = [
    Regime::TrainLarge,
    Regime::TrainSmallDOut,
    Regime::TrainAtCrossover,
    Regime::TrainBelowCrossover,
    Regime::Inference,
    Regime::NoKernels,
];
const MODES: [Mode; 4] = [Mode::Auto, Mode::BackwardOn, Mode::BackwardOff, Mode::FusedOff];

/// Expected tier number for each (mode, regime), written out by hand.
///
/// Rows follow `MODES`, columns follow `REGIMES`.
const EXPECTED: [[u8; 6]; 4] = [
    // large, small d_out, at crossover, below, inference, no kernels
    [1, 3, 1, 3, 2, 3],
    [1, 1, 1, 1, 2, 3],
    [3, 3, 3, 3, 2, 3],
    [3, 3, 3, 3, 3, 3],
];

/// Module inventory for the fleet check: `d_out` of each adapted projection,
/// all at 4096 rows in training.
pub const FLEET_D_OUT: [usize; 7] = [4096, 512, 512, 4096, 11008, 4096, 4096];
pub const FLEET_ROWS: usize = 4096;

pub fn context(regime: Regime, mode: Mode) -> DispatchContext {
    let mut ctx = match regime {
        Regime::TrainLarge => DispatchContext::accelerated(true, 4096, 4096),
        Regime::TrainSmallDOut => DispatchContext::accelerated(true, 4096, 512),
        Regime::TrainAtCrossover => DispatchContext::accelerated(true, 6144, 2048),
        Regime::TrainBelowCrossover => DispatchContext::accelerated(true, 6143, 2048),
        Regime::Inference => DispatchContext::accelerated(false, 4096, 4096),
        Regime::NoKernels => {
            let mut c = DispatchContext::accelerated(true, 4096, 4096);
            c.kernels_available = false;
            c
        }
    };
    match mode {
        Mode::Auto => {}
        Mode::BackwardOn => ctx.force_fused_backward = ForceMode::On,
        Mode::BackwardOff => ctx.force_fused_backward = ForceMode::Off,
        Mode::FusedOff => ctx.force_fused = ForceMode::Off,
    }
    ctx
}

pub(crate) fn run(cfg: &RunConfig) -> Result<SuiteOutput> {
    let mut cases = Vec::new();
    for (mi, &mode) in MODES.iter().enumerate() {
        for (ri, &regime) in REGIMES.iter().enumerate() {
            let ctx = context(regime, mode);
            let decision = select_tier(&ctx);
            let expected = EXPECTED[mi][ri];
            let outputs = json!({ "tier": decision.tier.number(), "expected_tier": expected, "reasons": decision.reasons });
            let id = format!("{}/{}", serde_json::to_value(mode)?.as_str().unwrap_or("?"), serde_json::to_value(regime)?.as_str().unwrap_or("?"));
            cases.push(case(id, cfg.seed, ctx, outputs, decision.tier.number() == expected));
        }
    }

    let mut fleet_tier1 = 0usize;
    for (k, &d_out) in FLEET_D_OUT.iter().enumerate() {
        let mut ctx = DispatchContext::accelerated(true, FLEET_ROWS, d_out);
        ctx.force_fused = cfg.fused;
        ctx.force_fused_backward = cfg.fused_backward;
        let decision = select_tier(&ctx);
        if decision.tier == Tier::FusedBackward {
            fleet_tier1 += 1;
        }
        let expected = if d_out >= 2048 { 1 } else { 3 };
        let pass = cfg.fused != ForceMode::Auto || cfg.fused_backward != ForceMode::Auto || decision.tier.number() == expected;
        let outputs = json!({ "tier": decision.tier.number(), "expected_tier": expected, "reasons": decision.reasons });
        cases.push(case(format!("fleet/{k}-d{d_out}"), cfg.seed, ctx, outputs, pass));
    }

    let metrics = json!({
        "canonical_contexts": MODES.len() * REGIMES.len(),
        "fleet_modules": FLEET_D_OUT.len(),
        "fleet_tier1": fleet_tier1,
        "fleet_tier1_fraction": fleet_tier1 as f64 / FLEET_D_OUT.len() as f64,
    });
    let ctx = context(Regime::TrainLarge, Mode::Auto);
    let kernels = vec![time_kernel("select_tier", cfg.repeats, cfg.warmup, || select_tier(&ctx))];
    Ok(SuiteOutput { cases, metrics, kernels })
}

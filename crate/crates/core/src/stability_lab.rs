//! Collapse-zone statistics of the magnitude scale and the stable-vs-naive
//! compose error sweep.

use crate::compose::{fused_compose, naive_compose, stable_compose, ComposeInputs, DEFAULT_TILE_ROWS};
use crate::error::{DoraError, Result};
use crate::linalg::{derive_seed, seeded_fixture, seeded_values, Fixture, RealMatrix};
use crate::numerics::DType;
use rayon::prelude::*;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollapseFraction {
    pub dtype: DType,
    pub threshold: f64,
    pub fraction: f64,
}

/// Fraction of `g` with `|g - 1|` below each dtype's collapse threshold
/// (half an ulp at one).
///
/// Below one the dtype grid is twice as fine, so `g` in
/// `(1 - threshold, 1 - threshold/2)` does not actually round to 1. The
/// symmetric count is what the threshold definition gives and is what is
/// reported.
pub fn collapse_fractions(g: &[f64], dtypes: &[DType]) -> Vec<CollapseFraction> {
    dtypes
        .iter()
        .map(|&dtype| {
            let threshold = dtype.collapse_threshold();
            let hits = g.iter().filter(|&&v| (v - 1.0).abs() < threshold).count();
            CollapseFraction {
                dtype,
                threshold,
                fraction: if g.is_empty() { 0.0 } else { hits as f64 / g.len() as f64 },
            }
        })
        .collect()
}

/// Source of magnitude-scale samples.
#[derive(Debug, Clone, PartialEq)]
pub enum GModel {
    Gaussian { mean: f64, std: f64 },
    /// Plain text, one value per line or whitespace separated; `#` starts a
    /// comment. The whole file is returned regardless of `n`.
    FromFile(PathBuf),
}

pub fn sample_g(model: &GModel, n: usize, seed: u64) -> Result<Vec<f64>> {
    match model {
        GModel::Gaussian { mean, std } => {
            if n == 0 {
                return Err(DoraError::InvalidConfig("sample_g needs n >= 1".into()));
            }
            Ok(seeded_values(Fixture::Gaussian { mean: *mean, std: *std }, n, seed))
        }
        GModel::FromFile(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| DoraError::Parse(format!("{}: {e}", path.display())))?;
            parse_g_text(&text).map_err(|e| DoraError::Parse(format!("{}: {e}", path.display())))
        }
    }
}

fn parse_g_text(text: &str) -> std::result::Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| format!("line {}: `{tok}` is not a number", lineno + 1))?;
            if !v.is_finite() {
                return Err(format!("line {}: `{tok}` is not finite", lineno + 1));
            }
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err("no values".into());
    }
    Ok(out)
}

/// `n` points evenly spaced over `[1 - half_width, 1 + half_width]`.
pub fn symmetric_grid(half_width: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        _ => (0..n)
            .map(|k| 1.0 - half_width + 2.0 * half_width * k as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub grid: Vec<f64>,
    pub rows: usize,
    pub d_out: usize,
    pub dtype: DType,
    pub seed: u64,
    pub scale: f64,
    pub base: Fixture,
    pub lora: Fixture,
}

impl Default for SweepConfig {
    /// 129 points over `1 ± 2^-6` (spacing `2^-12`, exact in fp32),
    /// `512 × 2048` activations, bf16, base and lora `N(0, 16²)`, `s = 2^-4`.
    fn default() -> Self {
        Self {
            grid: symmetric_grid(2f64.powi(-6), 129),
            rows: 512,
            d_out: 2048,
            dtype: DType::Bf16,
            seed: 0,
            scale: 0.0625,
            base: Fixture::Gaussian { mean: 0.0, std: 16.0 },
            lora: Fixture::Gaussian { mean: 0.0, std: 16.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub g: f64,
    pub seed: u64,
    pub stable_err: f64,
    pub naive_err: f64,
    pub fused_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub peak_stable: f64,
    pub peak_naive: f64,
    pub peak_ratio: f64,
    /// `stable_err <= naive_err` at every point.
    pub dominance: bool,
    /// `fused_err` bitwise equal to `stable_err` at every point.
    pub parity: bool,
}

fn max_abs_err(got: &RealMatrix, reference: &[f64]) -> f64 {
    got.data()
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs())
        .fold(0.0, f64::max)
}

fn sweep_point(cfg: &SweepConfig, index: usize, g_value: f64) -> Result<SweepPoint> {
    let seed = derive_seed(cfg.seed, index as u64);
    let base = seeded_fixture(cfg.base, cfg.rows, cfg.d_out, derive_seed(seed, 0), cfg.dtype);
    let lora = seeded_fixture(cfg.lora, cfg.rows, cfg.d_out, derive_seed(seed, 1), cfg.dtype);
    let g = vec![g_value; cfg.d_out];
    let inputs = ComposeInputs::new(&base, &lora, &g, cfg.scale)?;

    // fp64 delta of the stored operands
    let reference: Vec<f64> = base
        .data()
        .iter()
        .zip(lora.data())
        .map(|(&b, &l)| (g_value - 1.0) * b + g_value * (cfg.scale * l))
        .collect();

    let stable = stable_compose(&inputs)?;
    let naive = naive_compose(&inputs)?;
    let (fused, _) = fused_compose(&inputs, DEFAULT_TILE_ROWS)?;
    Ok(SweepPoint {
        g: g_value,
        seed,
        stable_err: max_abs_err(&stable, &reference),
        naive_err: max_abs_err(&naive, &reference),
        fused_err: max_abs_err(&fused, &reference),
    })
}

/// Max-abs error of each compose form against an fp64 reference, one
/// broadcast-constant `g` per grid point. Points run in parallel; each has
/// its own fixtures seeded from `(seed, index)`.
pub fn cancellation_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    if let Some(bad) = cfg.grid.iter().find(|g| !(**g > 0.0 && **g < 2.0)) {
        return Err(DoraError::InvalidConfig(format!("sweep grid value {bad} outside (0, 2)")));
    }
    let points = cfg
        .grid
        .par_iter()
        .enumerate()
        .map(|(k, &g)| sweep_point(cfg, k, g))
        .collect::<Result<Vec<_>>>()?;
    let peak_stable = points.iter().map(|p| p.stable_err).fold(0.0, f64::max);
    let peak_naive = points.iter().map(|p| p.naive_err).fold(0.0, f64::max);
    Ok(SweepResult {
        peak_ratio: peak_naive / peak_stable,
        dominance: points.iter().all(|p| p.stable_err <= p.naive_err),
        parity: points.iter().all(|p| p.fused_err.to_bits() == p.stable_err.to_bits()),
        peak_stable,
        peak_naive,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_g_collapses_everywhere() {
        let f = collapse_fractions(&[1.0; 10], &DType::ALL);
        assert!(f.iter().all(|c| c.fraction == 1.0));
    }

    #[test]
    fn outside_bf16_zone() {
        let f = collapse_fractions(&[1.0 + 2f64.powi(-6)], &[DType::Bf16]);
        assert_eq!(f[0].fraction, 0.0);
    }

    #[test]
    fn gaussian_fractions() {
        let g = sample_g(&GModel::Gaussian { mean: 1.0, std: 0.0015 }, 200_000, 3).unwrap();
        let f = collapse_fractions(&g, &[DType::Bf16, DType::Fp16]);
        assert!(f[0].fraction >= 0.95, "{f:?}");
        assert!((0.15..=0.35).contains(&f[1].fraction), "{f:?}");
    }

    #[test]
    fn zero_std_is_all_ones() {
        let g = sample_g(&GModel::Gaussian { mean: 1.0, std: 0.0 }, 17, 9).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
        assert!(sample_g(&GModel::Gaussian { mean: 1.0, std: 0.0 }, 0, 9).is_err());
    }

    #[test]
    fn text_parsing() {
        assert_eq!(parse_g_text("1.0\n0.999\n1.002\n").unwrap(), vec![1.0, 0.999, 1.002]);
        assert_eq!(parse_g_text("# header\n1 2 # two\n\n3").unwrap(), vec![1.0, 2.0, 3.0]);
        let err = parse_g_text("1.0\nabc\n").unwrap_err();
        assert!(err.contains("line 2"), "{err}");
        assert!(parse_g_text("").is_err());
        assert!(parse_g_text("nan").is_err());
    }

    #[test]
    fn grid_spacing_is_exact() {
        let g = symmetric_grid(2f64.powi(-6), 129);
        assert_eq!(g.len(), 129);
        assert_eq!(g[64], 1.0);
        assert_eq!(g[0], 1.0 - 2f64.powi(-6));
        assert_eq!(g[128], 1.0 + 2f64.powi(-6));
        assert!(g.iter().all(|&v| v == v as f32 as f64));
    }

    #[test]
    fn small_sweep_dominance_and_parity() {
        let cfg = SweepConfig {
            grid: symmetric_grid(2f64.powi(-6), 17),
            rows: 32,
            d_out: 200,
            ..SweepConfig::default()
        };
        let r = cancellation_sweep(&cfg).unwrap();
        assert!(r.dominance && r.parity);
        assert!(r.peak_ratio >= 2.0, "{}", r.peak_ratio);
    }

    #[test]
    fn bf16_collapse_point_on_large_base() {
        // base 256, g = 1 + 2^-9: the naive form loses the whole correction
        let cfg = SweepConfig {
            grid: vec![1.0 + 2f64.powi(-9)],
            rows: 4,
            d_out: 16,
            base: Fixture::Uniform { low: 256.0, high: 256.0 },
            lora: Fixture::Uniform { low: 0.0, high: 0.0 },
            ..SweepConfig::default()
        };
        let p = cancellation_sweep(&cfg).unwrap().points[0];
        assert_eq!(p.naive_err, 0.5);
        assert_eq!(p.stable_err, 0.0);
    }

    #[test]
    fn grid_outside_range_is_rejected() {
        let cfg = SweepConfig {
            grid: vec![2.5],
            ..SweepConfig::default()
        };
        assert!(cancellation_sweep(&cfg).is_err());
    }
}

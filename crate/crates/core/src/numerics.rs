//! Emulated reduced-precision arithmetic.
//!
//! Every value in this crate is carried as an `f64` that is exactly
//! representable in its declared [`DType`]. Half formats (`bf16`, `fp16`) are
//! emulated by re-rounding after each operation that is declared to be
//! computed in that format. Rounding is IEEE round-to-nearest, ties-to-even,
//! with gradual underflow (no flush-to-zero) and overflow to infinity.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Element formats understood by the engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Fp64,
    Fp32,
    Bf16,
    Fp16,
}

impl DType {
    pub const ALL: [DType; 4] = [DType::Fp64, DType::Fp32, DType::Bf16, DType::Fp16];

    /// Explicit (stored) mantissa bits.
    pub const fn mantissa_bits(self) -> u32 {
        match self {
            DType::Fp64 => 52,
            DType::Fp32 => 23,
            DType::Bf16 => 7,
            DType::Fp16 => 10,
        }
    }

    /// Smallest normal binary exponent.
    pub const fn min_exponent(self) -> i32 {
        match self {
            DType::Fp64 => -1022,
            DType::Fp32 | DType::Bf16 => -126,
            DType::Fp16 => -14,
        }
    }

    /// Largest finite binary exponent.
    pub const fn max_exponent(self) -> i32 {
        match self {
            DType::Fp64 => 1023,
            DType::Fp32 | DType::Bf16 => 127,
            DType::Fp16 => 15,
        }
    }

    pub const fn storage_bytes(self) -> u64 {
        match self {
            DType::Fp64 => 8,
            DType::Fp32 => 4,
            DType::Bf16 | DType::Fp16 => 2,
        }
    }

    /// Guard used when dividing by a row norm.
    pub const fn norm_eps(self) -> f64 {
        match self {
            DType::Fp64 | DType::Fp32 => 1e-12,
            DType::Bf16 | DType::Fp16 => 1e-6,
        }
    }

    /// Spacing of representable values immediately above 1.
    pub fn ulp_at_one(self) -> f64 {
        (-(self.mantissa_bits() as f64)).exp2()
    }

    /// Half an ulp at one: `|g - 1|` below this puts `g` in the collapse zone.
    pub fn collapse_threshold(self) -> f64 {
        self.ulp_at_one() / 2.0
    }

    pub fn max_finite(self) -> f64 {
        let m = self.mantissa_bits() as f64;
        (2.0 - (-m).exp2()) * (self.max_exponent() as f64).exp2()
    }

    pub fn is_half(self) -> bool {
        matches!(self, DType::Bf16 | DType::Fp16)
    }

    /// Round `x` to the nearest value representable in `self`.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        round_to_dtype(x, self)
    }

    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    #[inline]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    pub fn is_representable(self, x: f64) -> bool {
        x.is_nan() || self.round(x) == x
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::Fp64 => "fp64",
            DType::Fp32 => "fp32",
            DType::Bf16 => "bf16",
            DType::Fp16 => "fp16",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp64" | "f64" | "float64" => Ok(DType::Fp64),
            "fp32" | "f32" | "float32" => Ok(DType::Fp32),
            "bf16" | "bfloat16" => Ok(DType::Bf16),
            "fp16" | "f16" | "float16" | "half" => Ok(DType::Fp16),
            other => Err(format!("unknown dtype `{other}`")),
        }
    }
}

/// Round an `f64` to the nearest value of `dtype`, ties to even.
///
/// Rounding happens directly from the `f64` bit pattern, so there is no
/// double rounding through an intermediate format. NaN and infinities pass
/// through; values at or beyond the format's overflow boundary become
/// infinite; tiny values round onto the subnormal grid.
pub fn round_to_dtype(x: f64, dtype: DType) -> f64 {
    if dtype == DType::Fp64 || !x.is_finite() || x == 0.0 {
        return x;
    }
    let mant = dtype.mantissa_bits();
    let emin = dtype.min_exponent();
    let emax = dtype.max_exponent();

    let bits = x.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let exp = biased - 1023;

    if exp > emax {
        return f64::INFINITY.copysign(x);
    }
    if exp >= emin {
        // Normal in the target: drop the low mantissa bits with a
        // round-half-even bias. A carry may bump the exponent, which is the
        // correct result (including overflow past `max_finite`).
        let shift = 52 - mant;
        let lsb = (bits >> shift) & 1;
        let bias = (1u64 << (shift - 1)) - 1 + lsb;
        let rounded = (bits + bias) & !((1u64 << shift) - 1);
        if ((rounded >> 52) & 0x7ff) as i32 - 1023 > emax {
            return f64::INFINITY.copysign(x);
        }
        return f64::from_bits(rounded);
    }
    // Subnormal range of the target: fixed quantum. Scaling by a power of two
    // is exact here, so `round_ties_even` sees the true quotient.
    let quantum = ((emin - mant as i32) as f64).exp2();
    let r = (x / quantum).round_ties_even() * quantum;
    if r == 0.0 {
        0.0f64.copysign(x)
    } else {
        r
    }
}

/// IEEE-754 round-to-nearest square root in single precision.
///
/// `f32::sqrt` lowers to the hardware `sqrt` instruction, which is correctly
/// rounded; no approximate reciprocal-sqrt path is involved.
#[inline]
pub fn correctly_rounded_sqrt_f32(x: f32) -> f32 {
    x.sqrt()
}

/// `max(x, floor)` that propagates NaN instead of collapsing it to `floor`.
#[inline]
pub fn nan_preserving_clamp_min(x: f32, floor: f32) -> f32 {
    if x.is_nan() || floor.is_nan() {
        return f32::NAN;
    }
    if x < floor {
        floor
    } else {
        x
    }
}

/// Values of `dtype` immediately below and above `x` (inclusive when `x` is
/// itself representable). Only used for finite, in-range `x`.
pub fn neighbors(x: f64, dtype: DType) -> (f64, f64) {
    let r = dtype.round(x);
    if r == x {
        return (x, x);
    }
    let other = if r < x { next_up(r, dtype) } else { next_down(r, dtype) };
    if r < x {
        (r, other)
    } else {
        (other, r)
    }
}

/// Next representable value of `dtype` above `v`.
pub fn next_up(v: f64, dtype: DType) -> f64 {
    let step = quantum_above(v, dtype);
    v + step
}

/// Next representable value of `dtype` below `v`.
pub fn next_down(v: f64, dtype: DType) -> f64 {
    -next_up(-v, dtype)
}

fn quantum_above(v: f64, dtype: DType) -> f64 {
    let mant = dtype.mantissa_bits() as i32;
    let emin = dtype.min_exponent();
    if v == 0.0 {
        return ((emin - mant) as f64).exp2();
    }
    let exp = if v > 0.0 {
        v.log2().floor() as i32
    } else {
        // Moving up from a negative power of two stays in the lower binade.
        let e = (-v).log2().floor() as i32;
        if (-v) == (e as f64).exp2() {
            e - 1
        } else {
            e
        }
    };
    ((exp.max(emin) - mant) as f64).exp2()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_policy() {
        assert_eq!(DType::Fp64.norm_eps(), 1e-12);
        assert_eq!(DType::Fp32.norm_eps(), 1e-12);
        assert_eq!(DType::Bf16.norm_eps(), 1e-6);
        assert_eq!(DType::Fp16.norm_eps(), 1e-6);
    }

    #[test]
    fn collapse_thresholds() {
        assert_eq!(DType::Bf16.collapse_threshold(), 2f64.powi(-8));
        assert_eq!(DType::Fp16.collapse_threshold(), 2f64.powi(-11));
        assert_eq!(DType::Bf16.ulp_at_one(), 2f64.powi(-7));
    }

    #[test]
    fn bf16_rounding_examples() {
        assert_eq!(round_to_dtype(1.0, DType::Bf16), 1.0);
        assert_eq!(round_to_dtype(1.0 + 2f64.powi(-9), DType::Bf16), 1.0);
        // bf16 neighbours of 1 + 3*2^-9 are 1 and 1 + 2^-7; the latter is nearer.
        assert_eq!(
            round_to_dtype(1.0 + 3.0 * 2f64.powi(-9), DType::Bf16),
            1.0 + 2f64.powi(-7)
        );
    }

    #[test]
    fn ties_go_to_even() {
        // 1 + 2^-8 is exactly halfway between 1 (even) and 1 + 2^-7 (odd).
        assert_eq!(round_to_dtype(1.0 + 2f64.powi(-8), DType::Bf16), 1.0);
        // 1 + 3*2^-8 is halfway between 1 + 2^-7 (odd) and 1 + 2^-6 (even).
        assert_eq!(
            round_to_dtype(1.0 + 3.0 * 2f64.powi(-8), DType::Bf16),
            1.0 + 2f64.powi(-6)
        );
    }

    #[test]
    fn below_one_spacing_is_finer() {
        // Spacing below 1 is half the spacing above it, so a negative offset
        // inside the half-ulp band can still move off 1.
        let x = 1.0 - 0.75 * 2f64.powi(-8);
        assert_eq!(round_to_dtype(x, DType::Bf16), 1.0 - 2f64.powi(-8));
        assert_eq!(round_to_dtype(1.0 - 2f64.powi(-9), DType::Bf16), 1.0);
    }

    #[test]
    fn specials_and_overflow() {
        assert!(round_to_dtype(f64::NAN, DType::Bf16).is_nan());
        assert_eq!(round_to_dtype(f64::INFINITY, DType::Fp16), f64::INFINITY);
        assert_eq!(round_to_dtype(65504.0, DType::Fp16), 65504.0);
        assert_eq!(round_to_dtype(65519.0, DType::Fp16), 65504.0);
        // 65520 is the midpoint to 2^16, ties to even -> overflow.
        assert_eq!(round_to_dtype(65520.0, DType::Fp16), f64::INFINITY);
        assert_eq!(round_to_dtype(-1e6, DType::Fp16), f64::NEG_INFINITY);
        assert_eq!(round_to_dtype(f64::MAX, DType::Fp32), f64::INFINITY);
        assert_eq!(DType::Bf16.round(DType::Bf16.max_finite()), DType::Bf16.max_finite());
    }

    #[test]
    fn subnormals_are_kept() {
        let tiny = 2f64.powi(-24);
        assert_eq!(round_to_dtype(tiny, DType::Fp16), tiny);
        assert_eq!(round_to_dtype(tiny * 0.5, DType::Fp16), 0.0);
        assert_eq!(round_to_dtype(tiny * 0.75, DType::Fp16), tiny);
        assert_eq!(round_to_dtype(-tiny * 0.25, DType::Fp16).to_bits(), (-0.0f64).to_bits());
        let bf_tiny = 2f64.powi(-133);
        assert_eq!(round_to_dtype(bf_tiny, DType::Bf16), bf_tiny);
    }

    #[test]
    fn fp32_matches_native_cast() {
        for &x in &[0.1, 1.0 / 3.0, 1e-40, 3.4e38, 3.5e38, -7.25e-3, 1e-46] {
            assert_eq!(round_to_dtype(x, DType::Fp32), x as f32 as f64, "x = {x:e}");
        }
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(correctly_rounded_sqrt_f32(4.0), 2.0);
        assert_eq!(correctly_rounded_sqrt_f32(0.0).to_bits(), 0.0f32.to_bits());
        assert_eq!(correctly_rounded_sqrt_f32(2.0), 2f64.sqrt() as f32);
        assert!(correctly_rounded_sqrt_f32(-1.0).is_nan());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(nan_preserving_clamp_min(-1.0, 0.0), 0.0);
        assert_eq!(nan_preserving_clamp_min(3.0, 0.0), 3.0);
        assert!(nan_preserving_clamp_min(f32::NAN, 0.0).is_nan());
    }

    #[test]
    fn neighbour_helpers() {
        let (lo, hi) = neighbors(1.0 + 3.0 * 2f64.powi(-9), DType::Bf16);
        assert_eq!((lo, hi), (1.0, 1.0 + 2f64.powi(-7)));
        assert_eq!(next_down(1.0, DType::Bf16), 1.0 - 2f64.powi(-8));
        assert_eq!(next_up(-1.0, DType::Bf16), -1.0 + 2f64.powi(-8));
    }

    #[test]
    fn parse_names() {
        assert_eq!("bf16".parse::<DType>().unwrap(), DType::Bf16);
        assert_eq!("FP32".parse::<DType>().unwrap(), DType::Fp32);
        assert!("int8".parse::<DType>().is_err());
    }
}

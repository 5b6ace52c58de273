//! BF16 rounding on FP64-held values.
//!
//! BF16 keeps FP32's 8-bit exponent and 7 explicit mantissa bits. Rounding is
//! done directly from `f64` (no intermediate `f32` step) so there is no double
//! rounding.

/// Largest finite BF16 value, `(2 - 2^-7) * 2^127`.
pub const MAX: f64 = 3.389_531_389_251_535_5e38;

/// Smallest positive normal BF16 value.
pub const MIN_POSITIVE: f64 = 1.175_494_350_822_287_5e-38;

const MANTISSA_BITS: i32 = 7;

fn exponent(x: f64) -> i32 {
    ((x.to_bits() >> 52) & 0x7ff) as i32 - 1023
}

/// Rounds `x` to the nearest BF16 value, ties to even. Non-finite values pass
/// through unchanged; overflow rounds to infinity.
pub fn round(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let e = if x.abs() < MIN_POSITIVE {
        -126
    } else {
        exponent(x)
    };
    let quantum = 2f64.powi(e - MANTISSA_BITS);
    let r = (x / quantum).round_ties_even() * quantum;
    if r.abs() > MAX {
        f64::INFINITY.copysign(x)
    } else {
        r
    }
}

/// Distance from `x` to the next BF16 value away from zero.
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    let e = if x < MIN_POSITIVE { -126 } else { exponent(x) };
    2f64.powi(e - MANTISSA_BITS)
}

/// Encodes a value as BF16 bits (the upper half of its FP32 pattern), rounding
/// first.
pub fn to_bits(x: f64) -> u16 {
    ((round(x) as f32).to_bits() >> 16) as u16
}

pub fn from_bits(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

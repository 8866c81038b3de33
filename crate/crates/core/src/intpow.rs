//! Integer-only evaluation of `code^e` in unsigned fixed point.
//!
//! The exponent is split into an integer part, handled by exact integer
//! multiplication, and a fractional part expanded in binary:
//! `x^f = Π_k (x^(2^-k))^(bit_k)`. Each `x^(2^-k)` is one more fixed-point
//! square root of the previous one, and every square root is a short
//! integer Newton iteration seeded by a chord of `√` on the enclosing
//! power-of-four interval.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntPowConfig {
    /// Newton iterations per square root, in `[1, 8]`.
    pub iterations: u32,
    /// Fractional bits of the fixed-point format.
    pub fraction_bits: u32,
}

impl Default for IntPowConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            fraction_bits: 16,
        }
    }
}

impl IntPowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.iterations) {
            return Err(Error::validation("iterations", "must lie in [1, 8]"));
        }
        if !(1..=32).contains(&self.fraction_bits) {
            return Err(Error::validation("fraction_bits", "must lie in [1, 32]"));
        }
        Ok(())
    }
}

/// Unsigned fixed-point value `raw / 2^fraction_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fixed {
    pub raw: u128,
    pub fraction_bits: u32,
}

impl Fixed {
    pub fn to_f64(self) -> f64 {
        self.raw as f64 / (1u128 << self.fraction_bits) as f64
    }
}

/// Integer square root of `y` by Newton's method from a chord seed.
fn isqrt_newton(y: u128, iterations: u32) -> u128 {
    if y == 0 {
        return 0;
    }
    let n = 128 - y.leading_zeros();
    let k = (n - 1) / 2;
    // chord of √ between 4^k and 4^(k+1)
    let base = 1u128 << k;
    let mut g = base + (y - (1u128 << (2 * k))) / (3 * base);
    for _ in 0..iterations {
        g = (g + y / g) / 2;
    }
    g
}

fn overflow(what: &str) -> Error {
    Error::Range(format!(
        "{what} overflows the 128-bit accumulator; reduce fraction_bits"
    ))
}

/// `code^exponent_inv` computed with integer arithmetic only.
pub fn int_power_newton(code: u64, exponent_inv: f64, cfg: IntPowConfig) -> Result<Fixed> {
    cfg.validate()?;
    if !(0.25..=10.0).contains(&exponent_inv) {
        return Err(Error::domain(format!(
            "exponent {exponent_inv} outside [0.25, 10]"
        )));
    }
    let frac_bits = cfg.fraction_bits;
    if code == 0 {
        return Ok(Fixed {
            raw: 0,
            fraction_bits: frac_bits,
        });
    }
    let one = 1u128 << frac_bits;
    let mut whole = exponent_inv.floor() as u32;
    let mut frac = ((exponent_inv - f64::from(whole)) * one as f64).round() as u128;
    if frac == one {
        whole += 1;
        frac = 0;
    }

    let code = u128::from(code);
    let mut int_part: u128 = 1;
    for _ in 0..whole {
        int_part = int_part
            .checked_mul(code)
            .ok_or_else(|| overflow("integer power"))?;
    }
    if int_part.leading_zeros() < frac_bits {
        return Err(overflow("integer power"));
    }
    let mut acc = int_part << frac_bits;

    let mut root = code << frac_bits;
    for k in 1..=frac_bits {
        if frac == 0 {
            break;
        }
        root = isqrt_newton(root << frac_bits, cfg.iterations);
        let bit = 1u128 << (frac_bits - k);
        if frac & bit != 0 {
            frac &= !bit;
            let prod = acc
                .checked_mul(root)
                .ok_or_else(|| overflow("fractional power"))?;
            acc = (prod + (one >> 1)) >> frac_bits;
        }
    }
    Ok(Fixed {
        raw: acc,
        fraction_bits: frac_bits,
    })
}

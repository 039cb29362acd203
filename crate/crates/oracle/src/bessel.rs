//! Power series for `I_v(z)` in exact fixed-point integer arithmetic.
//!
//! Orders are restricted to integers and half-integers (`v = twice_v / 2`)
//! and arguments to rationals, which is what vMF normalizers in integer
//! dimension need. Each series term is carried as an integer scaled by
//! `2^FRAC_BITS` relative to the leading term, so the only rounding is the
//! floor in each step (relative size `2^-FRAC_BITS`) and the final `ln`.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

const FRAC_BITS: u64 = 256;

/// A positive rational argument `num / den`.
#[derive(Debug, Clone, Copy)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(num > 0 && den > 0);
        Self { num, den }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact decimal value of `x` (at most 12 fractional digits).
    pub fn from_f64(x: f64) -> Self {
        assert!(x > 0.0 && x.is_finite());
        let mut den = 1u64;
        while (x * den as f64 - (x * den as f64).round()).abs() > 1e-9 * x * den as f64 {
            den *= 10;
            assert!(den <= 1_000_000_000_000, "{x} is not a short decimal");
        }
        Self::new((x * den as f64).round() as u64, den)
    }

    fn ln(&self) -> f64 {
        (self.num as f64).ln() - (self.den as f64).ln()
    }
}

fn ln_factorial(n: u64) -> f64 {
    let mut acc = BigUint::one();
    for k in 2..=n {
        acc *= k;
    }
    if n < 2 {
        0.0
    } else {
        ln_big(&acc)
    }
}

/// `x = mantissa * 2^exponent` with `mantissa` in `[1, 2)`.
fn split_big(x: &BigUint) -> (f64, i64) {
    assert!(!x.is_zero());
    let bits = x.bits();
    let shift = bits.saturating_sub(64);
    let top = (x >> shift).to_u64().unwrap();
    let top_bits = 64 - top.leading_zeros() as i64;
    let mantissa = top as f64 / 2f64.powi(top_bits as i32 - 1);
    (mantissa, shift as i64 + top_bits - 1)
}

/// `ln(x * 2^-frac_bits)`, keeping the binary exponent exact until the end.
fn ln_big_scaled(x: &BigUint, frac_bits: u64) -> f64 {
    let (mantissa, exponent) = split_big(x);
    mantissa.ln() + (exponent - frac_bits as i64) as f64 * std::f64::consts::LN_2
}

fn ln_big(x: &BigUint) -> f64 {
    ln_big_scaled(x, 0)
}

/// `ln Gamma(twice_v / 2 + 1)`.
pub fn ln_gamma_half_integer_plus_one(twice_v: u64) -> f64 {
    if twice_v.is_multiple_of(2) {
        ln_factorial(twice_v / 2)
    } else {
        // Gamma(n + 1/2) = (2n)! / (4^n n!) sqrt(pi), with n + 1/2 = v + 1
        let n = twice_v.div_ceil(2);
        ln_factorial(2 * n) - n as f64 * 4f64.ln() - ln_factorial(n) + 0.5 * std::f64::consts::PI.ln()
    }
}

/// `ln I_v(z)` for `v = twice_v / 2` by summing the ascending series exactly.
pub fn series_log_bessel_i(twice_v: u64, z: Ratio) -> f64 {
    // term ratio t_k / t_{k-1} = z^2 / (4 k (k + v)) = num^2 / (2 den^2 k (2k + twice_v))
    let num_sq = BigUint::from(z.num) * z.num;
    let den_sq2 = BigUint::from(z.den) * z.den * 2u32;
    let mut term: BigUint = BigUint::one() << FRAC_BITS;
    let mut sum = term.clone();
    let v = twice_v as f64 / 2.0;
    let q = 0.25 * z.value() * z.value();
    let mut k: u64 = 0;
    loop {
        k += 1;
        term = term * &num_sq / (&den_sq2 * k * (2 * k + twice_v));
        sum += &term;
        let past_peak = (k as f64) * (k as f64 + v) > q;
        if past_peak && (term.is_zero() || (&term << 90u32) < sum) {
            break;
        }
    }
    let ln_sum = ln_big_scaled(&sum, FRAC_BITS);
    let ln_half_z = z.ln() - std::f64::consts::LN_2;
    v * ln_half_z - ln_gamma_half_integer_plus_one(twice_v) + ln_sum
}

/// `ln C_m(kappa)` built on [`series_log_bessel_i`].
pub fn series_log_cm(m: u64, kappa: Ratio) -> f64 {
    assert!(m >= 2);
    let twice_v = m - 2;
    let v = twice_v as f64 / 2.0;
    let half = m as f64 / 2.0;
    v * kappa.ln() - half * (2.0 * std::f64::consts::PI).ln() - series_log_bessel_i(twice_v, kappa)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_order_matches_sinh() {
        let z = Ratio::new(1, 1);
        let exact = (2.0 / std::f64::consts::PI).sqrt().ln() + 1f64.sinh().ln();
        let got = series_log_bessel_i(1, z);
        assert!((got - exact).abs() < 1e-15, "{got} vs {exact}");
    }

    #[test]
    fn zero_order_at_one() {
        let got = series_log_bessel_i(0, Ratio::new(1, 1));
        assert!((got - 1.266_065_877_752_008_4_f64.ln()).abs() < 1e-15, "{got}");
    }

    #[test]
    fn gamma_half_integers() {
        // Gamma(1.5) = sqrt(pi) / 2
        let g = ln_gamma_half_integer_plus_one(1);
        assert!((g - (std::f64::consts::PI.sqrt() / 2.0).ln()).abs() < 1e-15);
        assert!((ln_gamma_half_integer_plus_one(8) - 24f64.ln()).abs() < 1e-15);
    }
}

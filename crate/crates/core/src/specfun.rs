//! Modified Bessel functions of the first kind and the von Mises-Fisher
//! log-normalizer.
//!
//! Everything here works in log space or with ratios so that nothing
//! underflows for the orders that appear with embedding dimensions in the
//! hundreds. The evaluation strategy for `ln I_v(z)` is:
//!
//! * `z <= max(30, v)`: power series, summed relative to its leading term.
//! * otherwise, if the Hankel expansion for order `v` decreases monotonically
//!   from its first term, that expansion is used directly.
//! * otherwise `I_mu(z)` is evaluated with the Hankel expansion at the
//!   fractional order `mu = v - floor(v)` and the remaining factor is the
//!   product of ratios `I_{mu+j} / I_{mu+j-1}`, obtained by downward recurrence
//!   from a continued fraction at the top order.
//!
//! The vMF density on the unit sphere in `R^m` is
//!
//! ```text
//! p(x; mu, kappa) = C_m(kappa) exp(kappa mu^T x)
//! C_m(kappa)     = kappa^(m/2-1) / ((2 pi)^(m/2) I_(m/2-1)(kappa))
//! ```

use std::f64::consts::{LN_2, PI};

use log::warn;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecFunError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("continued fraction for I_{v}({z}) / I_{v}-1({z}) did not converge in {iterations} iterations")]
    NoConvergence { v: f64, z: f64, iterations: usize },
}

pub type Result<T> = std::result::Result<T, SpecFunError>;

/// How `log_cm` and `grad_log_cm` are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CmEvalMode {
    /// Bessel-function evaluation.
    #[default]
    Exact,
    /// Closed-form bound on the Bessel ratio, and its integral for the value.
    Bound,
}

impl std::str::FromStr for CmEvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exact" => Ok(CmEvalMode::Exact),
            "bound" | "bound-approximation" => Ok(CmEvalMode::Bound),
            other => Err(format!("unknown normalizer mode `{other}` (expected exact|bound)")),
        }
    }
}

impl std::fmt::Display for CmEvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CmEvalMode::Exact => "exact",
            CmEvalMode::Bound => "bound",
        })
    }
}

/// A predicted output vector split into mean direction and concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct VmfParams {
    mu: Vec<f64>,
    kappa: f64,
}

impl VmfParams {
    /// Decomposes `e_hat` into `mu = e_hat / |e_hat|` and `kappa = |e_hat|`.
    pub fn from_vector(e_hat: &[f64]) -> Result<Self> {
        if e_hat.iter().any(|x| !x.is_finite()) {
            return Err(SpecFunError::NonFinite("vector component".into()));
        }
        let kappa = norm(e_hat);
        if kappa == 0.0 {
            return Err(SpecFunError::Domain("zero vector has no direction".into()));
        }
        let mu = e_hat.iter().map(|x| x / kappa).collect();
        Ok(Self { mu, kappa })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `ln C_m(kappa) + kappa mu^T x` for a unit vector `x`.
    pub fn log_density(&self, x: &[f64], mode: CmEvalMode) -> Result<f64> {
        if x.len() != self.mu.len() {
            return Err(SpecFunError::Domain(format!(
                "dimension mismatch: {} vs {}",
                x.len(),
                self.mu.len()
            )));
        }
        let dot: f64 = self.mu.iter().zip(x).map(|(a, b)| a * b).sum();
        Ok(log_cm(self.dim(), self.kappa, mode)? + self.kappa * dot)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_args(v: f64, z: f64) -> Result<()> {
    if !v.is_finite() || !z.is_finite() {
        return Err(SpecFunError::NonFinite(format!("v={v}, z={z}")));
    }
    if v < 0.0 {
        return Err(SpecFunError::Domain(format!("order must be nonnegative, got {v}")));
    }
    if z < 0.0 {
        return Err(SpecFunError::Domain(format!("argument must be nonnegative, got {z}")));
    }
    Ok(())
}

fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Largest `z` handled by the power series for order `v`.
fn series_limit(v: f64) -> f64 {
    v.max(30.0)
}

/// `ln sum_k (z^2/4)^k / (k! (v+1)_k)`, the series for `I_v(z)` without its
/// leading factor `(z/2)^v / Gamma(v+1)`.
fn log_series_sum(v: f64, z: f64) -> f64 {
    const RESCALE: f64 = 1e280;
    let q = 0.25 * z * z;
    let mut term = 1.0;
    // sum of terms k >= 1, kept apart from the leading 1 for ln_1p accuracy
    let mut rest = 0.0;
    let mut log_scale = 0.0;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= q / (k * (k + v));
        rest += term;
        if rest > RESCALE {
            rest /= RESCALE;
            term /= RESCALE;
            log_scale += RESCALE.ln();
        }
        let past_peak = q < k * (k + v);
        if past_peak && term <= rest * 1e-17 {
            break;
        }
        if k > 1e6 {
            break;
        }
    }
    if log_scale == 0.0 {
        rest.ln_1p()
    } else {
        // the leading 1 is negligible once a rescale has happened
        rest.ln() + log_scale
    }
}

/// Sum of the Hankel expansion `sum_k (-1)^k a_k(v) / z^k` with
/// `I_v(z) ~ e^z / sqrt(2 pi z) * sum`, accepted only when the terms shrink
/// monotonically from the first one (so the truncation error is bounded by
/// the first omitted term and there is no cancellation). Returns `None` when
/// the expansion is not usable at this `(v, z)`.
fn hankel_scaled_sum(v: f64, z: f64) -> Option<f64> {
    let four_v2 = 4.0 * v * v;
    let mut sum = 1.0;
    let mut term: f64 = 1.0;
    for k in 1..=400 {
        let odd = (2 * k - 1) as f64;
        let next = -term * (four_v2 - odd * odd) / (8.0 * k as f64 * z);
        if next == 0.0 {
            return Some(sum);
        }
        if next.abs() >= term.abs() {
            return None;
        }
        sum += next;
        term = next;
        if term.abs() <= 1e-17 * sum.abs() {
            return Some(sum);
        }
    }
    None
}

/// Iteration budget for the ratio continued fraction. It needs on the order
/// of `sqrt(z)` terms when `z >> v`.
fn cf_iteration_cap(z: f64) -> usize {
    500 + (20.0 * z.sqrt()).ceil() as usize
}

/// `I_v(z) / I_{v-1}(z)` from the continued fraction
/// `1 / (2v/z + 1 / (2(v+1)/z + ...))`, modified Lentz evaluation.
fn ratio_continued_fraction(v: f64, z: f64, max_iter: usize) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for k in 0..max_iter {
        let b = 2.0 * (v + k as f64) / z;
        d += b;
        if d == 0.0 {
            d = TINY;
        }
        c = b + 1.0 / c;
        if c == 0.0 {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            return Ok(f);
        }
    }
    Err(SpecFunError::NoConvergence { v, z, iterations: max_iter })
}

/// `ln I_v(z)`.
///
/// Accurate to near machine precision (relative to `|ln I_v(z)|`) for
/// `v <= 1024`, `z <= 1e6`; returns `-inf` for `z = 0, v > 0`.
pub fn log_bessel_i(v: f64, z: f64) -> Result<f64> {
    check_args(v, z)?;
    if z == 0.0 {
        return Ok(if v == 0.0 { 0.0 } else { f64::NEG_INFINITY });
    }
    if z <= series_limit(v) {
        return Ok(v * (0.5 * z).ln() - ln_gamma(v + 1.0) + log_series_sum(v, z));
    }
    let log_prefactor = z - 0.5 * (2.0 * PI * z).ln();
    if let Some(s) = hankel_scaled_sum(v, z) {
        return Ok(log_prefactor + s.ln());
    }
    // z > 30 here, so the fractional-order anchor always converges.
    let steps = v.floor();
    let mu = v - steps;
    let anchor = hankel_scaled_sum(mu, z).ok_or_else(|| {
        SpecFunError::Domain(format!("Hankel expansion failed at order {mu}, z={z}"))
    })?;
    let mut ratio = ratio_continued_fraction(v, z, cf_iteration_cap(z))?;
    let mut log_ratios = 0.0;
    let mut order = v;
    for _ in 0..steps as usize {
        log_ratios += ratio.ln();
        order -= 1.0;
        ratio = 1.0 / (2.0 * order / z + ratio);
    }
    Ok(log_prefactor + anchor.ln() + log_ratios)
}

/// `I_v(z) / I_{v-1}(z)` for `v >= 1/2`, in `[0, 1)`.
///
/// Uses the continued fraction, or for `z` far beyond `v^2` the quotient of
/// the two Hankel sums (the common `e^z / sqrt(2 pi z)` factor cancels).
pub fn bessel_ratio(v: f64, z: f64) -> Result<f64> {
    check_args(v, z)?;
    if v < 0.5 {
        return Err(SpecFunError::Domain(format!("ratio needs v >= 1/2, got {v}")));
    }
    if z == 0.0 {
        return Ok(0.0);
    }
    if z > series_limit(v) {
        if let (Some(top), Some(bottom)) = (hankel_scaled_sum(v, z), hankel_scaled_sum(v - 1.0, z)) {
            return Ok(top / bottom);
        }
    }
    ratio_continued_fraction(v, z, cf_iteration_cap(z))
}

/// Closed-form bound `z / (v - 1 + sqrt((v+1)^2 + z^2))` on the Bessel ratio,
/// for `v > 1`.
pub fn ratio_lower_bound(v: f64, z: f64) -> Result<f64> {
    check_args(v, z)?;
    if v <= 1.0 {
        return Err(SpecFunError::Domain(format!("bound needs v > 1, got {v}")));
    }
    Ok(z / (v - 1.0 + (v + 1.0).hypot(z)))
}

/// Antiderivative of `ratio_lower_bound(v, .)`.
fn bound_antiderivative(v: f64, z: f64) -> f64 {
    let s = (v + 1.0).hypot(z);
    s - (v - 1.0) * (v - 1.0 + s).ln()
}

fn check_dim(m: usize) -> Result<()> {
    if m < 2 {
        return Err(SpecFunError::Domain(format!("dimension must be at least 2, got {m}")));
    }
    Ok(())
}

/// `ln C_m(0)`: minus the log surface area of the unit sphere in `R^m`.
fn log_cm_uniform(m: usize) -> f64 {
    let half = m as f64 / 2.0;
    ln_gamma(half) - LN_2 - half * PI.ln()
}

/// `ln C_m(kappa)`.
///
/// In [`CmEvalMode::Bound`] the value is the integral of the ratio bound,
/// anchored so that it agrees with the exact value at `kappa = 0`:
/// `ln C_m(0) - (A(kappa) - A(0))` with
/// `A(z) = sqrt((v+1)^2 + z^2) - (v-1) ln(v - 1 + sqrt((v+1)^2 + z^2))`,
/// `v = m/2`. Because the ratio bound dominates the true ratio, this never
/// exceeds the exact value.
pub fn log_cm(m: usize, kappa: f64, mode: CmEvalMode) -> Result<f64> {
    check_dim(m)?;
    check_args(0.0, kappa)?;
    match mode {
        CmEvalMode::Exact => {
            if kappa == 0.0 {
                return Ok(log_cm_uniform(m));
            }
            let half = m as f64 / 2.0;
            let v = half - 1.0;
            if kappa <= series_limit(v) {
                // kappa^v cancels against the series prefactor (kappa/2)^v
                let constant = v * LN_2 + ln_gamma(v + 1.0) - half * (2.0 * PI).ln();
                return Ok(constant - log_series_sum(v, kappa));
            }
            Ok(v * kappa.ln() - half * (2.0 * PI).ln() - log_bessel_i(v, kappa)?)
        }
        CmEvalMode::Bound => {
            let v = m as f64 / 2.0;
            if v <= 1.0 {
                return Err(SpecFunError::Domain(format!(
                    "bound mode needs m > 2, got {m}"
                )));
            }
            Ok(log_cm_uniform(m) - (bound_antiderivative(v, kappa) - bound_antiderivative(v, 0.0)))
        }
    }
}

/// `d/dkappa ln C_m(kappa) = -I_{m/2}(kappa) / I_{m/2-1}(kappa)`, in `(-1, 0]`.
///
/// Exact mode falls back to the bound only if the continued fraction fails
/// to converge.
pub fn grad_log_cm(m: usize, kappa: f64, mode: CmEvalMode) -> Result<f64> {
    check_dim(m)?;
    check_args(0.0, kappa)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    let v = m as f64 / 2.0;
    match mode {
        CmEvalMode::Exact => match bessel_ratio(v, kappa) {
            Ok(r) => Ok(-r),
            Err(SpecFunError::NoConvergence { .. }) if v > 1.0 => {
                warn!("Bessel ratio did not converge at m={m}, kappa={kappa}; using bound");
                Ok(-ratio_lower_bound(v, kappa)?)
            }
            Err(e) => Err(e),
        },
        CmEvalMode::Bound => Ok(-ratio_lower_bound(v, kappa)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn bessel_identity_at_zero() {
        assert_eq!(log_bessel_i(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(log_bessel_i(2.5, 0.0).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn half_order_closed_form() {
        // I_{1/2}(z) = sqrt(2 / (pi z)) sinh z
        for &z in &[1e-3, 0.5, 1.0, 7.0, 29.0, 31.0, 200.0, 5e3] {
            let expected = (2.0 / (PI * z)).sqrt().ln() + z + (-(-2.0 * z).exp_m1()).ln() - LN_2;
            let got = log_bessel_i(0.5, z).unwrap();
            assert!((got - expected).abs() <= 1e-13 * expected.abs().max(1.0), "z={z}: {got} vs {expected}");
        }
        let got = log_bessel_i(0.5, 1.0).unwrap();
        assert!((got - (-0.064_352_0)).abs() < 1e-7, "{got}");
        assert!((got.exp() - 0.937_67).abs() < 1e-5);
    }

    #[test]
    fn ratio_half_integer_closed_form() {
        // I_{3/2}(z) / I_{1/2}(z) = coth z - 1/z
        for &z in &[0.01f64, 1.0, 3.0, 40.0, 400.0] {
            let expected = if z < 0.1 {
                z / 3.0 - z.powi(3) / 45.0 + 2.0 * z.powi(5) / 945.0
            } else {
                1.0 / z.tanh() - 1.0 / z
            };
            assert!(rel(bessel_ratio(1.5, z).unwrap(), expected) < 1e-12, "z={z}");
        }
        assert!((bessel_ratio(1.5, 1.0).unwrap() - 0.313_035_285_5).abs() < 1e-9);
        assert_eq!(bessel_ratio(1.5, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ratio_at_huge_argument() {
        let r = bessel_ratio(150.0, 1e8).unwrap();
        assert!((r - 1.0).abs() < 1e-5 && r < 1.0, "{r}");
    }

    #[test]
    fn bound_formula_values() {
        assert_eq!(ratio_lower_bound(150.0, 0.0).unwrap(), 0.0);
        let b = ratio_lower_bound(2.0, 1.0).unwrap();
        assert!((b - 1.0 / (1.0 + 10f64.sqrt())).abs() < 1e-15);
        assert!((b - 0.240_253).abs() < 1e-6);
        let b = ratio_lower_bound(150.0, 150.0).unwrap();
        assert!((b - 0.414_547_504_7).abs() < 1e-9, "{b}");
        assert!(ratio_lower_bound(1.0, 1.0).is_err());
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(log_bessel_i(-1.0, 1.0), Err(SpecFunError::Domain(_))));
        assert!(matches!(log_bessel_i(1.0, -1.0), Err(SpecFunError::Domain(_))));
        assert!(matches!(log_bessel_i(f64::NAN, 1.0), Err(SpecFunError::NonFinite(_))));
        assert!(matches!(log_bessel_i(1.0, f64::INFINITY), Err(SpecFunError::NonFinite(_))));
        assert!(bessel_ratio(0.25, 1.0).is_err());
        assert!(log_cm(1, 1.0, CmEvalMode::Exact).is_err());
        assert!(grad_log_cm(1, 1.0, CmEvalMode::Exact).is_err());
        assert!(log_cm(2, 1.0, CmEvalMode::Bound).is_err());
    }

    #[test]
    fn log_cm_three_dimensional() {
        let v = log_cm(3, 1.0, CmEvalMode::Exact).unwrap();
        assert!((v - (1.0 / (4.0 * PI * 1f64.sinh())).ln()).abs() < 1e-13);
        assert!((v - (-2.692_46)).abs() < 1e-5, "{v}");
        let uniform = log_cm(3, 0.0, CmEvalMode::Exact).unwrap();
        assert!((uniform - (1.0 / (4.0 * PI)).ln()).abs() < 1e-14);
        let near = log_cm(3, 1e-9, CmEvalMode::Exact).unwrap();
        assert!((near - uniform).abs() < 1e-12);
        assert!(log_cm(300, 10.0, CmEvalMode::Exact).unwrap() > log_cm(300, 20.0, CmEvalMode::Exact).unwrap());
    }

    #[test]
    fn log_cm_two_dimensional_matches_circle() {
        // C_2(kappa) = 1 / (2 pi I_0(kappa))
        let i0_at_1 = 1.266_065_877_752_008_4_f64;
        let v = log_cm(2, 1.0, CmEvalMode::Exact).unwrap();
        assert!((v + (2.0 * PI * i0_at_1).ln()).abs() < 1e-14);
    }

    #[test]
    fn gradient_values() {
        assert!((grad_log_cm(3, 1.0, CmEvalMode::Exact).unwrap() + 0.313_035_285_5).abs() < 1e-9);
        for m in [2, 3, 300] {
            assert_eq!(grad_log_cm(m, 0.0, CmEvalMode::Exact).unwrap(), 0.0);
        }
        assert_eq!(grad_log_cm(300, 0.0, CmEvalMode::Bound).unwrap(), 0.0);
    }

    #[test]
    fn bound_mode_is_consistent_and_below_exact() {
        for &kappa in &[0.0, 0.5, 3.0, 50.0, 400.0, 5000.0] {
            let b = log_cm(300, kappa, CmEvalMode::Bound).unwrap();
            let e = log_cm(300, kappa, CmEvalMode::Exact).unwrap();
            assert!(b <= e + 1e-9 * e.abs().max(1.0), "kappa={kappa}: {b} > {e}");
        }
        for &kappa in &[0.5f64, 3.0, 50.0, 400.0] {
            let h = 1e-5 * kappa.max(1.0);
            let fd = (log_cm(300, kappa + h, CmEvalMode::Bound).unwrap()
                - log_cm(300, kappa - h, CmEvalMode::Bound).unwrap())
                / (2.0 * h);
            let g = grad_log_cm(300, kappa, CmEvalMode::Bound).unwrap();
            // ln C_300 is ~400 here, so the difference quotient resolves only ~1e-8
            assert!((fd - g).abs() < 1e-7 + 1e-7 * g.abs(), "kappa={kappa}: {fd} vs {g}");
        }
    }

    #[test]
    fn vmf_params_decomposition() {
        let p = VmfParams::from_vector(&[3.0, 4.0]).unwrap();
        assert_eq!(p.kappa(), 5.0);
        assert_eq!(p.mu(), &[0.6, 0.8]);
        assert!(VmfParams::from_vector(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn continued_fraction_reports_non_convergence() {
        assert!(matches!(
            ratio_continued_fraction(1.5, 1e6, 3),
            Err(SpecFunError::NoConvergence { iterations: 3, .. })
        ));
    }
}

//! Scalar special functions used throughout the crate.

use core::f64::consts::PI;

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
pub const SQRT_2: f64 = core::f64::consts::SQRT_2;

/// Standard normal cumulative distribution function.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * libm::exp(-0.5 * z * z)
}

/// Centered Gaussian density with variance `var` (one dimension).
#[inline]
pub fn gauss1(u: f64, var: f64) -> f64 {
    libm::exp(-0.5 * u * u / var) / libm::sqrt(2.0 * PI * var)
}

/// CDF of a centered Gaussian with variance `var`.
#[inline]
pub fn gauss1_cdf(u: f64, var: f64) -> f64 {
    norm_cdf(u / libm::sqrt(var))
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[inline]
pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// `log(exp(a) + exp(b))` without overflow.
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + libm::log1p(libm::exp(lo - hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cdf_reference_values() {
        assert_abs_diff_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(2.0 * norm_cdf(1.0) - 1.0, 0.682_689_492_137_085_9, epsilon = 1e-14);
        assert_abs_diff_eq!(norm_cdf(-8.0), 6.220_960_574_271_785e-16, epsilon = 1e-28);
    }

    #[test]
    fn gamma_half_squared_is_pi() {
        assert_abs_diff_eq!(gamma(0.5) * gamma(0.5), PI, epsilon = 1e-13);
        assert_abs_diff_eq!(ln_gamma(5.0), libm::log(24.0), epsilon = 1e-13);
    }

    #[test]
    fn log_add_exp_matches_direct() {
        let v = log_add_exp(1.0, 2.0);
        assert_abs_diff_eq!(v, libm::log(libm::exp(1.0) + libm::exp(2.0)), epsilon = 1e-14);
        assert_eq!(log_add_exp(f64::NEG_INFINITY, 3.0), 3.0);
    }
}

//! Gaussian kernel algebra and the special-function identities behind the
//! contraction argument.

use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::model::Profile;
use crate::quad::{integrate_adaptive, Rule};
use crate::special::ln_gamma;

/// Isotropic Gaussian `φ_k(u; t) = (2πt)^{-k/2} exp(-‖u‖²/(2t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernelParams {
    pub k: usize,
    pub t: f64,
}

/// Hölder exponent and envelope constants for the kernel-correction bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimateParams {
    pub alpha: f64,
    pub prefactor: f64,
    pub inflation: f64,
    pub horizon: f64,
}

impl KernelEstimateParams {
    pub fn new(alpha: f64, prefactor: f64, inflation: f64, horizon: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            bail!(Domain, "alpha must lie in (0, 1), got {alpha}");
        }
        if !(prefactor > 0.0 && inflation > 0.0 && horizon > 0.0) {
            bail!(Domain, "kernel estimate constants must be positive");
        }
        Ok(KernelEstimateParams { alpha, prefactor, inflation, horizon })
    }
}

/// `φ_k(u; t)`.
pub fn phi(u: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        bail!(Domain, "variance must be positive, got {t}");
    }
    Ok(phi_unchecked(u, t))
}

#[inline]
pub fn phi_unchecked(u: &[f64], t: f64) -> f64 {
    let r2: f64 = u.iter().map(|v| v * v).sum();
    (-0.5 * r2 / t).exp() / (2.0 * PI * t).powf(0.5 * u.len() as f64)
}

/// Returns `(φ_k(b - a; s + r), ∫ φ_k(x - a; s) φ_k(x - b; r) dx)`, the
/// second by adaptive quadrature of the product, one coordinate at a time.
pub fn gaussian_convolve_check(a: &[f64], b: &[f64], s: f64, r: f64) -> Result<(f64, f64)> {
    if !(s > 0.0 && r > 0.0) {
        bail!(Domain, "variances must be positive");
    }
    if a.len() != b.len() {
        bail!(Domain, "points must share a dimension");
    }
    let diff: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let analytic = phi_unchecked(&diff, s + r);
    let mut quad = 1.0;
    for (ai, bi) in a.iter().zip(b) {
        let lo = ai.min(*bi) - 14.0 * s.max(r).sqrt();
        let hi = ai.max(*bi) + 14.0 * s.max(r).sqrt();
        // split at both centres so the peaks sit on panel edges
        let cuts = [lo, ai.min(*bi), ai.max(*bi), hi];
        let mut acc = 0.0;
        for w in cuts.windows(2) {
            let (v, _) = integrate_adaptive(
                |x| phi_unchecked(&[x - ai], s) * phi_unchecked(&[x - bi], r),
                w[0],
                w[1],
                1e-15,
                1e-13,
            )?;
            acc += v;
        }
        quad *= acc;
    }
    Ok((analytic, quad))
}

/// `g_α^{*n}(t) = t^{nα/2-1} Γ(α/2)^n / Γ(nα/2)`, the `n`-fold convolution of
/// `g_α(t) = t^{α/2-1}` on `(0, t)`.
pub fn g_alpha_power(n: u32, alpha: f64, t: f64) -> Result<f64> {
    if n == 0 {
        bail!(Domain, "convolution power must be at least 1");
    }
    if !(alpha > 0.0 && alpha < 2.0) {
        bail!(Domain, "alpha must lie in (0, 2), got {alpha}");
    }
    if !(t > 0.0) {
        bail!(Domain, "t must be positive");
    }
    let nf = n as f64;
    let log = (nf * alpha / 2.0 - 1.0) * t.ln() + nf * ln_gamma(alpha / 2.0) - ln_gamma(nf * alpha / 2.0);
    Ok(log.exp())
}

/// `∫₀ᵗ w(s, t-s) ds` for `w ~ s^{a-1}` at 0 and `~ (t-s)^{b-1}` at `t`.
///
/// The integrand receives both `s` and `t - s` so neither loses precision
/// near its singular end.
///
/// Splits at `t/2` and substitutes `s = (t/2)·v^{1/a}` (and the mirror image)
/// so both halves become smooth; `n` Gauss–Legendre points per half.
pub fn integrate_power_singular<F: FnMut(f64, f64) -> f64>(mut w: F, t: f64, a: f64, b: f64, n: usize) -> f64 {
    let r = Rule::gauss_legendre(n);
    let half = 0.5 * t;
    let left = r.integrate(0.0, 1.0, |v| {
        let s = half * v.powf(1.0 / a);
        w(s, t - s) * half / a * v.powf(1.0 / a - 1.0)
    });
    let right = r.integrate(0.0, 1.0, |v| {
        let tau = half * v.powf(1.0 / b);
        w(t - tau, tau) * half / b * v.powf(1.0 / b - 1.0)
    });
    left + right
}

/// Checks `g^{*(n+1)}(t) = ∫₀ᵗ g^{*n}(t-s) g(s) ds` numerically; returns
/// `(closed form of g^{*(n+1)}, quadrature)`.
pub fn g_alpha_recursion_check(n: u32, alpha: f64, t: f64) -> Result<(f64, f64)> {
    let closed = g_alpha_power(n + 1, alpha, t)?;
    g_alpha_power(n, alpha, t)?;
    let a = alpha / 2.0;
    let b = n as f64 * alpha / 2.0;
    let gn_coeff = g_alpha_power(n, alpha, 1.0)?;
    let quad = integrate_power_singular(
        |s, tau| {
            gn_coeff * tau.powf(b - 1.0) * s.powf(a - 1.0)
        },
        t,
        a,
        b,
        40,
    );
    Ok((closed, quad))
}

/// `ln b_n` with `b_n = (C_T/2)^n (2M)^{d/2} T^{nα/2+1} Γ(α/2)^n / Γ(nα/2)`.
pub fn contraction_bound_log(n: u32, alpha: f64, c_t: f64, m_box: f64, horizon: f64, d: usize) -> Result<f64> {
    if n == 0 {
        bail!(Domain, "n must be at least 1");
    }
    if !(alpha > 0.0 && alpha < 2.0) {
        bail!(Domain, "alpha must lie in (0, 2), got {alpha}");
    }
    if !(c_t > 0.0 && m_box > 0.0 && horizon > 0.0 && d >= 1) {
        bail!(Domain, "contraction bound parameters must be positive");
    }
    let nf = n as f64;
    Ok(nf * (c_t / 2.0).ln() + 0.5 * d as f64 * (2.0 * m_box).ln() + (nf * alpha / 2.0 + 1.0) * horizon.ln()
        + nf * ln_gamma(alpha / 2.0)
        - ln_gamma(nf * alpha / 2.0))
}

pub fn contraction_bound(n: u32, alpha: f64, c_t: f64, m_box: f64, horizon: f64, d: usize) -> Result<f64> {
    Ok(contraction_bound_log(n, alpha, c_t, m_box, horizon, d)?.exp())
}

/// Smallest `n ≤ n_max` with `b_n < tol`.
pub fn contraction_terms_needed(
    tol: f64,
    alpha: f64,
    c_t: f64,
    m_box: f64,
    horizon: f64,
    d: usize,
    n_max: u32,
) -> Result<Option<u32>> {
    let lt = tol.ln();
    for n in 1..=n_max {
        if contraction_bound_log(n, alpha, c_t, m_box, horizon, d)? < lt {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

/// One row of a contraction sweep, as emitted in CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub n: u32,
    pub alpha: f64,
    pub bound: f64,
    pub log_bound: f64,
}

pub fn contraction_sweep(n_max: u32, alpha: f64, c_t: f64, m_box: f64, horizon: f64, d: usize) -> Result<Vec<BoundRow>> {
    (1..=n_max)
        .map(|n| {
            let l = contraction_bound_log(n, alpha, c_t, m_box, horizon, d)?;
            Ok(BoundRow { n, alpha, bound: l.exp(), log_bound: l })
        })
        .collect()
}

/// The mollifier `χ_ε(m) = χ((m - x¹)/ε)/ε`, supported on `[x¹-ε, x¹+ε]`.
pub fn mollifier(epsilon: f64, center: f64) -> Result<Profile> {
    if !(epsilon > 0.0) {
        bail!(Domain, "mollifier width must be positive");
    }
    crate::model::mollifier(epsilon, center)
}

/// `∫ f·χ_ε` by Gauss–Legendre panels over the support.
pub fn mollify<F: FnMut(f64) -> f64>(profile: &Profile, mut f: F) -> f64 {
    let r = Rule::gauss_legendre(20);
    let (lo, hi) = profile.support();
    let panels = 32;
    let step = (hi - lo) / panels as f64;
    (0..panels)
        .map(|p| {
            let a = lo + p as f64 * step;
            r.integrate(a, a + step, |u| profile.value(u) * f(u))
        })
        .sum()
}

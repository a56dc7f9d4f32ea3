//! Quadrature rules: Gauss–Legendre, Gauss–Hermite and an adaptive
//! Gauss–Kronrod integrator.

use alloc::vec::Vec;
use core::f64::consts::PI;
#[allow(unused_imports)]
use crate::fmath::*;

use crate::error::{bail, Result};

/// Nodes and weights of an interpolatory rule on a fixed interval.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// Gauss–Legendre rule with `n` points on `[-1, 1]`.
    pub fn gauss_legendre(n: usize) -> Self {
        assert!(n >= 1);
        let mut nodes = alloc::vec![0.0; n];
        let mut weights = alloc::vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut pp;
            loop {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2 * j + 1) as f64 * z * p2 - j as f64 * p3) / (j + 1) as f64;
                }
                pp = n as f64 * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() < 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            let w = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Rule { nodes, weights }
    }

    /// Gauss–Hermite rule for expectations under the standard normal law:
    /// `E[f(Z)] ≈ Σ wᵢ f(zᵢ)`.
    pub fn gauss_hermite_normal(n: usize) -> Self {
        assert!(n >= 1);
        // Physicists' rule by Newton iteration on orthonormal Hermite polynomials.
        let pim4 = 0.751_125_544_464_942_5_f64; // π^{-1/4}
        let mut x = alloc::vec![0.0; n];
        let mut w = alloc::vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = pim4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-14 {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[m - 1] = 0.0;
        }
        let s = core::f64::consts::SQRT_2;
        let norm = 1.0 / PI.sqrt();
        Rule {
            nodes: x.iter().rev().map(|v| v * s).collect(),
            weights: w.iter().rev().map(|v| v * norm).collect(),
        }
    }

    /// Maps a rule on `[-1, 1]` onto `[a, b]` and integrates `f`.
    #[inline]
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let c = 0.5 * (a + b);
        let r = 0.5 * (b - a);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(c + r * x);
        }
        acc * r
    }
}

// Gauss–Kronrod 7/15 abscissae and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut rk = fc * WGK[7];
    let mut rg = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        rk += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            rg += WG[j / 2] * (f1 + f2);
        }
    }
    (rk * h, ((rk - rg) * h).abs())
}

/// Adaptive Gauss–Kronrod integration of `f` over `[a, b]`.
///
/// Bisects the interval with the largest error estimate until the summed
/// estimate drops below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate_adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<(f64, f64)> {
    if a == b {
        return Ok((0.0, 0.0));
    }
    let mut segs: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(64);
    let (v, e) = gk15(&mut f, a, b);
    segs.push((a, b, v, e));
    for _ in 0..5000 {
        let total: f64 = segs.iter().map(|s| s.2).sum();
        let err: f64 = segs.iter().map(|s| s.3).sum();
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok((total, err));
        }
        let (idx, _) = segs
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("nonempty");
        let (lo, hi, _, _) = segs.swap_remove(idx);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        segs.push((lo, mid, v1, e1));
        segs.push((mid, hi, v2, e2));
    }
    let total: f64 = segs.iter().map(|s| s.2).sum();
    let err: f64 = segs.iter().map(|s| s.3).sum();
    if err.is_finite() && err <= 1e3 * abs_tol.max(rel_tol * total.abs()) {
        return Ok((total, err));
    }
    bail!(Numerical, "adaptive quadrature on [{a}, {b}] did not converge (error {err:e})")
}

/// Nested adaptive integration over a rectangle.
pub fn integrate_adaptive_2d<F: FnMut(f64, f64) -> f64>(
    mut f: F,
    (ax, bx): (f64, f64),
    (ay, by): (f64, f64),
    tol: f64,
) -> Result<f64> {
    let mut inner_err = None;
    let (v, _) = integrate_adaptive(
        |x| match integrate_adaptive(|y| f(x, y), ay, by, tol * 0.1, 1e-13) {
            Ok((v, _)) => v,
            Err(e) => {
                inner_err = Some(e);
                0.0
            }
        },
        ax,
        bx,
        tol,
        1e-13,
    )?;
    match inner_err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let r = Rule::gauss_legendre(6);
        // degree 11 is exact for 6 points
        let v = r.integrate(-1.0, 2.0, |x| x.powi(11) - 3.0 * x.powi(4));
        let exact = (2f64.powi(12) - 1.0) / 12.0 - 3.0 * (2f64.powi(5) + 1.0) / 5.0;
        assert_abs_diff_eq!(v, exact, epsilon = 1e-10);
        let w: f64 = r.weights.iter().sum();
        assert_abs_diff_eq!(w, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn hermite_normal_moments() {
        for n in [1usize, 4, 9, 20] {
            let r = Rule::gauss_hermite_normal(n);
            let m0: f64 = r.weights.iter().sum();
            assert_abs_diff_eq!(m0, 1.0, epsilon = 1e-12);
            if n >= 3 {
                let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
                let m4: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(4)).sum();
                assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn adaptive_handles_peaked_integrand() {
        let (v, _) = integrate_adaptive(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-10, 1e-12).unwrap();
        let exact = 2.0 * (1.0f64 / 1e-2).atan() / 1e-2;
        assert_abs_diff_eq!(v, exact, epsilon = 1e-8);
    }
}

//! Closed-form joint laws of Brownian motion (with or without constant drift)
//! and the running supremum of its first coordinate.
//!
//! For a start `x0` and `u = 2m - x¹ - x0¹ ≥ 0` the reflection principle gives
//!
//! ```text
//! p(m, x; t) = 2u / (t √(2πt)) · exp(-u²/(2t)) · φ_{d-1}(x̃ - x̃0; t),   m ≥ max(x¹, x0¹),
//! ```
//!
//! which is nonnegative, integrates to one over `{m ≥ x¹}`, and is the seed
//! of the parametrix expansion. A constant drift `μ` multiplies it by the
//! Girsanov weight `exp(μ·(x - x0) - |μ|²t/2)`.

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::kernels::phi_unchecked;
use crate::model::{DriftKind, DriftSpec, Drift, Initial, InitialSpec, JointDensityGrid, ModelSpec, Provenance, TriangularGrid};
use crate::special::{gauss1, norm_cdf, INV_SQRT_2PI};
use crate::MAX_DIM;

/// Reflection kernel `g(u; t) = 2u/(t√(2πt))·exp(-u²/(2t))`: the density of
/// `(sup W, W)` at `(b, y)` with `u = 2b - y`.
#[inline]
pub fn reflection_kernel(u: f64, t: f64) -> f64 {
    2.0 * u / (t * t.sqrt()) * INV_SQRT_2PI * (-0.5 * u * u / t).exp()
}

/// Joint density of `(M_t, W_t)` for Brownian motion started at `x0`.
pub fn bm_joint_density(m: f64, x: &[f64], t: f64, x0: &[f64]) -> Result<f64> {
    if !(t > 0.0) {
        bail!(Domain, "t must be positive, got {t}");
    }
    Ok(bm_joint_density_unchecked(m, x, t, x0))
}

#[inline]
pub fn bm_joint_density_unchecked(m: f64, x: &[f64], t: f64, x0: &[f64]) -> f64 {
    if m < x[0] || m < x0[0] {
        return 0.0;
    }
    let u = 2.0 * m - x[0] - x0[0];
    let mut v = reflection_kernel(u, t);
    for k in 1..x.len() {
        v *= gauss1(x[k] - x0[k], t);
    }
    v
}

/// `P(M_t ≤ m) = 2Φ((m - x0¹)/√t) - 1`.
pub fn bm_sup_cdf(m: f64, t: f64, x01: f64) -> Result<f64> {
    if !(t > 0.0) {
        bail!(Domain, "t must be positive, got {t}");
    }
    if m < x01 {
        return Ok(0.0);
    }
    Ok(2.0 * norm_cdf((m - x01) / t.sqrt()) - 1.0)
}

/// Joint density of `(M_t, X¹_t)` for `X = x0 + μt + W` in one dimension.
pub fn drifted_bm_joint_density(m: f64, x1: f64, t: f64, mu: f64, x01: f64) -> Result<f64> {
    if !(t > 0.0) {
        bail!(Domain, "t must be positive, got {t}");
    }
    Ok(drifted_unchecked(m, x1, t, mu, x01))
}

#[inline]
fn drifted_unchecked(m: f64, x1: f64, t: f64, mu: f64, x01: f64) -> f64 {
    if m < x1 || m < x01 {
        return 0.0;
    }
    reflection_kernel(2.0 * m - x1 - x01, t) * (mu * (x1 - x01) - 0.5 * mu * mu * t).exp()
}

/// `P(M_t ≤ m, X¹_t ≤ x)` for drifted Brownian motion from `x01` (the joint CDF).
pub fn drifted_bm_joint_cdf(m: f64, x: f64, t: f64, mu: f64, x01: f64) -> f64 {
    if m <= x01 {
        return 0.0;
    }
    let x = x.min(m);
    let s = t.sqrt();
    let a = m - x01;
    let y = x - x01;
    // ∫_{-∞}^{y} [φ(z;t) - φ(z-2a;t)] e^{μz-μ²t/2} dz
    let first = norm_cdf((y - mu * t) / s);
    let second = (2.0 * mu * a).exp() * norm_cdf((y - 2.0 * a - mu * t) / s);
    (first - second).max(0.0)
}

/// Mass of `(M_t, X¹_t)` in the rectangle `[m1, m2] × [x1, x2]`.
pub fn drifted_bm_cell_mass(m1: f64, m2: f64, x1: f64, x2: f64, t: f64, mu: f64, x01: f64) -> f64 {
    drifted_bm_joint_cdf(m2, x2, t, mu, x01) - drifted_bm_joint_cdf(m1, x2, t, mu, x01)
        - drifted_bm_joint_cdf(m2, x1, t, mu, x01)
        + drifted_bm_joint_cdf(m1, x1, t, mu, x01)
}

/// First-coordinate factor of the exact density for a Gaussian start
/// `N(mean, w²)` and constant drift `mu`; closed form in the start variable.
///
/// The start integral runs over `x0 ≤ m` only, where the Gaussian times the
/// reflection kernel is again Gaussian in `x0`.
pub fn gaussian_start_factor(m: f64, x1: f64, t: f64, mu: f64, mean: f64, w: f64) -> f64 {
    if m < x1 {
        return 0.0;
    }
    let w2 = w * w;
    // absorb e^{-μ x0} into the start law
    let shifted = mean - mu * w2;
    let pref = (mu * x1 - 0.5 * mu * mu * t).exp() * (-mu * mean + 0.5 * mu * mu * w2).exp();
    let c = 2.0 * m - x1;
    let var = w2 + t;
    let v_star = w2 * t / var;
    let c_star = (shifted * t + c * w2) / var;
    let core = if v_star > 0.0 {
        let sd = v_star.sqrt();
        (c - c_star) * norm_cdf((m - c_star) / sd) + v_star * gauss1(m - c_star, v_star)
    } else if m >= shifted {
        c - shifted
    } else {
        0.0
    };
    pref * 2.0 / t * gauss1(c - shifted, var) * core
}

/// Evaluates the exact density of a zero- or constant-drift model at one point.
pub struct ExactDensity<'a> {
    model: &'a ModelSpec,
    mu: [f64; MAX_DIM],
}

impl<'a> ExactDensity<'a> {
    pub fn new(model: &'a ModelSpec) -> Result<Self> {
        let mut mu = [0.0; MAX_DIM];
        match (&model.drift_kind, &model.drift) {
            (DriftKind::Zero, _) => {}
            (DriftKind::Constant, Drift::Known(DriftSpec::Constant { mu: m })) => mu[..model.d].copy_from_slice(m),
            (DriftKind::Constant, d) => {
                d.eval(&[0.0; MAX_DIM][..model.d], &mut mu[..model.d]);
            }
            (DriftKind::General, _) => bail!(Unsupported, "no closed form for a general drift"),
        }
        Ok(ExactDensity { model, mu })
    }

    pub fn drift(&self) -> &[f64] {
        &self.mu[..self.model.d]
    }

    /// `p(m, x; t)`; on the diagonal this is the one-sided limit from `x¹ < m`.
    pub fn eval(&self, m: f64, x: &[f64], t: f64) -> f64 {
        let d = self.model.d;
        match &self.model.initial.law {
            Initial::Known(InitialSpec::Gaussian { mean, width }) => {
                let mut v = gaussian_start_factor(m, x[0], t, self.mu[0], mean[0], *width);
                for k in 1..d {
                    v *= gauss1(x[k] - mean[k] - self.mu[k] * t, t + width * width);
                }
                v
            }
            _ => {
                let mut acc = 0.0;
                for a in self.model.initial.truncated_atoms(48, m) {
                    let mut v = bm_joint_density_unchecked(m, x, t, &a.x[..d]);
                    if v == 0.0 {
                        continue;
                    }
                    let mut e = 0.0;
                    for k in 0..d {
                        e += self.mu[k] * (x[k] - a.x[k]) - 0.5 * self.mu[k] * self.mu[k] * t;
                    }
                    v *= e.exp();
                    acc += a.w * v;
                }
                acc
            }
        }
    }
}

/// Exact density of a zero- or constant-drift model on a grid.
pub fn exact_density(model: &ModelSpec, grid: Arc<TriangularGrid>) -> Result<JointDensityGrid> {
    let ex = ExactDensity::new(model)?;
    let times = grid.times.clone();
    Ok(JointDensityGrid::from_fn(grid, Provenance::Exact, |s, m, x| ex.eval(m, x, times[s])))
}

/// The parametrix seed `p₀ = ∫ p_{W*,W}(m - x0¹, x - x0; t) f0(x0) dx0`.
///
/// Gaussian starts use the closed form; other laws use tensor Gauss–Legendre
/// atoms, doubled until the largest nodal change is below `1e-8` relative.
pub fn p0_seed(model: &ModelSpec, grid: Arc<TriangularGrid>) -> Result<JointDensityGrid> {
    let provenance = if model.drift_kind == DriftKind::Zero { Provenance::Exact } else { Provenance::Parametrix };
    let times = grid.times.clone();
    let d = model.d;
    match &model.initial.law {
        Initial::Known(InitialSpec::Gaussian { mean, width }) => {
            let (mean, width) = (mean.clone(), *width);
            Ok(JointDensityGrid::from_fn(grid, provenance, move |s, m, x| {
                let t = times[s];
                let mut v = gaussian_start_factor(m, x[0], t, 0.0, mean[0], width);
                for k in 1..d {
                    v *= gauss1(x[k] - mean[k], t + width * width);
                }
                v
            }))
        }
        _ => {
            let mix = |n: usize| {
                let rows: Vec<Vec<crate::model::Atom>> =
                    (0..grid.n_m()).map(|im| model.initial.truncated_atoms(n, grid.m_at(im))).collect();
                let times = times.clone();
                let g = grid.clone();
                JointDensityGrid::from_fn(grid.clone(), provenance, move |s, m, x| {
                    let im = ((m - g.origin) / g.h).round() as i64 - g.m_lo;
                    rows[im as usize].iter().map(|a| a.w * bm_joint_density_unchecked(m, x, times[s], &a.x[..d])).sum()
                })
            };
            let mut n = 8;
            let mut prev = mix(n);
            loop {
                n *= 2;
                let next = mix(n);
                let mut worst: f64 = 0.0;
                let mut scale: f64 = 0.0;
                for (a, b) in prev.values.iter().flatten().zip(next.values.iter().flatten()) {
                    worst = worst.max((a - b).abs());
                    scale = scale.max(b.abs());
                }
                if worst <= 1e-8 * scale.max(1e-300) {
                    return Ok(next);
                }
                if n >= 256 {
                    bail!(Numerical, "initial-law quadrature did not settle: max nodal change {worst:e} at {n} nodes");
                }
                prev = next;
            }
        }
    }
}

/// Smallest `C` with `p(m,x;t) ≤ C·φ_{d+1}(m - x0¹, m - x¹, x̃ - x̃0; 2t)` on all
/// nodes where the envelope exceeds `floor`.
pub fn fit_gaussian_domination(p: &JointDensityGrid, x0: &[f64], floor: f64) -> f64 {
    let g = &p.grid;
    let d = g.d;
    let ne = g.n_extra();
    let mut c: f64 = 0.0;
    let mut u = [0.0; MAX_DIM + 1];
    let mut xt = [0.0; MAX_DIM];
    for (s, t) in g.times.iter().enumerate() {
        for im in 0..g.n_m() {
            let Some(end) = g.row_end(im) else { continue };
            let m = g.m_at(im);
            for ix in 0..=end {
                let x1 = g.x_at(ix);
                for e in 0..ne {
                    g.extra_point(e, &mut xt[..d - 1]);
                    u[0] = m - x0[0];
                    u[1] = m - x1;
                    for k in 1..d {
                        u[k + 1] = xt[k - 1] - x0[k];
                    }
                    let env = phi_unchecked(&u[..d + 1], 2.0 * t);
                    if env > floor {
                        c = c.max(p.values[s][g.idx(im, ix, e)] / env);
                    }
                }
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, uniform_times};
    use crate::quad::integrate_adaptive;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use alloc::vec;

    #[test]
    fn reference_value_and_indicator() {
        let v = bm_joint_density(1.0, &[0.0], 1.0, &[0.0]).unwrap();
        assert_abs_diff_eq!(v, 4.0 * INV_SQRT_2PI * (-2.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.215_963, epsilon = 1e-6);
        assert_eq!(bm_joint_density(0.5, &[0.6], 1.0, &[0.0]).unwrap(), 0.0);
        assert_eq!(bm_joint_density(-0.1, &[-0.5], 1.0, &[0.0]).unwrap(), 0.0);
        assert!(bm_joint_density(1.0, &[0.0], 0.0, &[0.0]).is_err());
    }

    #[test]
    fn drifted_reference_value() {
        let v = drifted_bm_joint_density(1.0, 0.0, 1.0, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(v, 0.215_963_5 * (-0.5f64).exp(), epsilon = 1e-6);
        assert_abs_diff_eq!(v, 0.130_987, epsilon = 2e-6);
        for (m, x) in [(0.3, -0.2), (1.5, 1.0), (2.0, -1.0)] {
            assert_eq!(
                drifted_bm_joint_density(m, x, 0.7, 0.0, 0.0).unwrap(),
                bm_joint_density(m, &[x], 0.7, &[0.0]).unwrap()
            );
        }
    }

    fn total_mass(mu: f64, t: f64) -> f64 {
        // ∫_0^∞ dm ∫_{-∞}^{m} dx
        integrate_adaptive(
            |m| {
                integrate_adaptive(|x| drifted_unchecked(m, x, t, mu, 0.0), m - 20.0, m, 1e-13, 1e-13).unwrap().0
            },
            0.0,
            20.0,
            1e-11,
            1e-12,
        )
        .unwrap()
        .0
    }

    #[test]
    fn normalization() {
        assert_abs_diff_eq!(total_mass(0.0, 1.0), 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(total_mass(1.0, 1.0), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn sup_cdf_values() {
        assert_eq!(bm_sup_cdf(0.0, 1.0, 0.0).unwrap(), 0.0);
        assert_eq!(bm_sup_cdf(-1.0, 1.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(bm_sup_cdf(60.0, 1.0, 0.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(bm_sup_cdf(1.0, 1.0, 0.0).unwrap(), 0.682_689, epsilon = 1e-6);
    }

    #[test]
    fn sup_cdf_matches_integrated_density() {
        for m_top in [0.5, 1.0, 2.2] {
            let (v, _) = integrate_adaptive(
                |m| integrate_adaptive(|x| bm_joint_density_unchecked(m, &[x], 1.0, &[0.0]), m - 20.0, m, 1e-13, 1e-13).unwrap().0,
                0.0,
                m_top,
                1e-11,
                1e-12,
            )
            .unwrap();
            assert_abs_diff_eq!(v, bm_sup_cdf(m_top, 1.0, 0.0).unwrap(), epsilon = 1e-8);
        }
    }

    #[test]
    fn joint_cdf_matches_quadrature() {
        for (m, x, mu) in [(1.0, 0.2, 0.0), (1.3, -0.4, 0.7), (0.8, 2.0, -0.5)] {
            let xm: f64 = if x < m { x } else { m };
            let (v, _) = integrate_adaptive(
                |mm| {
                    integrate_adaptive(|xx| drifted_unchecked(mm, xx, 0.9, mu, 0.0), -20.0, xm.min(mm), 1e-13, 1e-13).unwrap().0
                },
                0.0,
                m,
                1e-11,
                1e-12,
            )
            .unwrap();
            assert_abs_diff_eq!(drifted_bm_joint_cdf(m, x, 0.9, mu, 0.0), v, epsilon = 1e-8);
        }
    }

    #[test]
    fn gaussian_start_reduces_to_point_mass() {
        for (m, x) in [(0.5, 0.1), (1.0, -0.3), (0.2, 0.2)] {
            let point = drifted_unchecked(m, x, 0.5, 0.4, 0.0);
            let narrow = gaussian_start_factor(m, x, 0.5, 0.4, 0.0, 1e-3);
            assert_relative_eq!(narrow, point, max_relative = 1e-5);
        }
        // wide start against direct quadrature of the mixture
        let w = 0.3;
        let (m, x, t, mu) = (0.4, -0.2, 0.6, 0.8);
        let (q, _) = integrate_adaptive(|x0| gauss1(x0 - 0.1, w * w) * drifted_unchecked(m, x, t, mu, x0), -5.0, m, 1e-14, 1e-13).unwrap();
        assert_relative_eq!(gaussian_start_factor(m, x, t, mu, 0.1, w), q, max_relative = 1e-10);
    }

    #[test]
    fn seed_mass_and_point_limit() {
        let model = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 1e-3 }),
            1,
        )
        .unwrap();
        let grid = Arc::new(TriangularGrid::boxed(1, 7.0, 281, 1, uniform_times(1.0, 4), 1.0).unwrap());
        let p0 = p0_seed(&model, grid.clone()).unwrap();
        assert_eq!(p0.provenance, Provenance::Exact);
        for s in 1..4 {
            assert_abs_diff_eq!(p0.mass(s), 1.0, epsilon = 2e-3);
        }
        let g = &p0.grid;
        let mut worst: f64 = 0.0;
        for im in 0..g.n_m() {
            for ix in 0..g.n_x() {
                if g.is_active(im, ix) && g.m_at(im) > 0.05 {
                    let v = bm_joint_density_unchecked(g.m_at(im), &[g.x_at(ix)], 1.0, &[0.0]);
                    worst = worst.max((p0.at(3, im, ix, 0) - v).abs());
                }
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn seed_factorizes_in_two_dimensions() {
        let model = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0, 0.5], width: 0.2 }),
            2,
        )
        .unwrap();
        let grid = Arc::new(TriangularGrid::boxed(2, 4.0, 41, 21, uniform_times(1.0, 2), 1.0).unwrap());
        let p0 = p0_seed(&model, grid.clone()).unwrap();
        let model1 = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 0.2 }),
            1,
        )
        .unwrap();
        let mut xt = [0.0];
        for im in (0..41).step_by(5) {
            for ix in (0..41).step_by(3) {
                if !grid.is_active(im, ix) {
                    continue;
                }
                for e in 0..21 {
                    grid.extra_point(e, &mut xt);
                    let first = ExactDensity::new(&model1).unwrap().eval(grid.m_at(im), &[grid.x_at(ix)], 1.0);
                    let second = gauss1(xt[0] - 0.5, 1.0 + 0.04);
                    assert_relative_eq!(p0.at(1, im, ix, e), first * second, max_relative = 1e-12, epsilon = 1e-300);
                }
            }
        }
    }

    #[test]
    fn non_gaussian_start_uses_atoms() {
        let model = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Uniform { lo: vec![-0.5], hi: vec![0.5] }),
            1,
        )
        .unwrap();
        let grid = Arc::new(TriangularGrid::boxed(1, 6.0, 121, 1, uniform_times(1.0, 2), 1.0).unwrap());
        let p0 = p0_seed(&model, grid).unwrap();
        assert_abs_diff_eq!(p0.mass(1), 1.0, epsilon = 5e-3);
    }

    #[test]
    fn domination_constant_is_finite() {
        let model = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 1e-3 }),
            1,
        )
        .unwrap();
        let grid = Arc::new(TriangularGrid::boxed(1, 6.0, 121, 1, uniform_times(1.0, 8), 1.0).unwrap());
        let p = exact_density(&model, grid).unwrap();
        let c = fit_gaussian_domination(&p, &[0.0], 1e-12);
        // analytic sup of the ratio is 8π/√(2π)·√2·e^{-1/2}
        let bound = 8.0 * core::f64::consts::PI * INV_SQRT_2PI * core::f64::consts::SQRT_2 * (-0.5f64).exp();
        assert!(c > 0.0 && c <= bound * 1.001, "{c} vs {bound}");
    }
}

//! Residual diagnostics for candidate densities: the weak PDE with its
//! diagonal boundary term, the strong boundary condition in one dimension,
//! the three membership norms of the uniqueness class, the diagonal Volterra
//! identity and the parabolic problem solved by `q_H`.
//!
//! Time integrals run over the stored slices with the trapezoid rule in
//! `σ = √s` (`ds = 2σ dσ`). The diagonal trace behaves like `s^{-1/2}` near
//! `s = 0`; in `σ` its integrand has the finite limit
//! `(4/√(2π))·E[∂_mΦ(X₀¹, X₀¹, X̃₀)]`, which is used at `σ = 0`.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dual::KernelEval;
use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::kernels::contraction_bound;
use crate::model::{
    Atom, JointDensityGrid, ModelSpec, Profile, ProfileKind, TestFunction, TriangularGrid,
};
use crate::quad::Rule;
use crate::special::INV_SQRT_2PI;
use crate::MAX_DIM;

/// Atoms of the initial law used for the initial and `s → 0` terms.
fn initial_atoms(model: &ModelSpec) -> Vec<Atom> {
    model.initial.truncated_atoms(64, f64::MAX)
}

/// `∫₀^{t_k} f(s) ds` from values at the slices, trapezoid in `σ = √s`.
/// `limit0` is the limit of `2σ·f(σ²)` as `σ → 0`.
pub fn sigma_trapezoid(times: &[f64], values: &[f64], limit0: f64) -> f64 {
    let mut acc = 0.0;
    let mut prev_s = 0.0;
    let mut prev_f = limit0;
    for (t, v) in times.iter().zip(values) {
        let s = t.sqrt();
        let f = 2.0 * s * v;
        acc += 0.5 * (s - prev_s) * (prev_f + f);
        prev_s = s;
        prev_f = f;
    }
    acc
}

/// Terms of the weak identity for one test function and one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakResidualReport {
    pub phi_id: String,
    pub t: f64,
    /// `∫_𝒯 Φ p(·; t)`.
    pub lhs: f64,
    /// `∫ Φ(m, m, x̃) f₀(m, x̃)`.
    pub initial: f64,
    /// `∫₀ᵗ ∫_𝒯 p ℒΦ`.
    pub generator: f64,
    /// `½ ∫₀ᵗ ∫ ∂_mΦ(m, m, x̃) p(m, m, x̃; s)`.
    pub boundary: f64,
    pub residual: f64,
    /// Summed change of the four terms when the density is restricted to
    /// every other lattice node (same slices).
    pub space_error: f64,
    /// Summed change of the four terms on every other slice (same lattice).
    pub time_error: f64,
    /// `space_error + time_error` plus a rounding floor. It bounds the
    /// fine-grid error whenever each part converges at order one or better.
    pub error_estimate: f64,
    pub pass: bool,
}

/// Residual and its four terms on a single grid (no error estimate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakTerms {
    pub lhs: f64,
    pub initial: f64,
    pub generator: f64,
    pub boundary: f64,
}

impl WeakTerms {
    pub fn residual(&self) -> f64 {
        self.lhs - (self.initial + self.generator + self.boundary)
    }
}

fn check_support(p: &JointDensityGrid, phi: &TestFunction) -> Result<()> {
    let g = &p.grid;
    let ((m_lo, m_hi), xs) = phi.support();
    let eps = 1e-12;
    let (gm_lo, gm_hi) = (g.m_at(0), g.m_at(g.n_m() - 1));
    let (gx_lo, gx_hi) = (g.x_at(0), g.x_at(g.n_x() - 1));
    if m_lo < gm_lo - eps || m_hi > gm_hi + eps {
        bail!(Support, "test function {} has m-support [{m_lo}, {m_hi}] outside the box", phi.id);
    }
    if xs[0].0 < gx_lo - eps || xs[0].1 > gx_hi + eps {
        bail!(Support, "test function {} has x¹-support outside the box", phi.id);
    }
    for (k, a) in g.extra.iter().enumerate() {
        let (lo, hi) = xs[k + 1];
        if lo < a.lo - eps || hi > a.node(a.n - 1) + eps {
            bail!(Support, "test function {} has x^{}-support outside the box", phi.id, k + 2);
        }
    }
    Ok(())
}

/// The four terms of the weak identity at `slice`.
pub fn weak_terms(p: &JointDensityGrid, model: &ModelSpec, phi: &TestFunction, slice: usize) -> Result<WeakTerms> {
    check_support(p, phi)?;
    let g = &p.grid;
    if slice >= g.n_slices() {
        bail!(Validation, "slice {slice} out of range");
    }
    let d = g.d;
    let lhs = p.integrate(slice, |m, x1, xt| phi.value(m, &full_x(x1, xt, d)[..d]));
    let atoms = initial_atoms(model);
    let initial: f64 = atoms.iter().map(|a| a.w * phi.value(a.x[0], &a.x[..d])).sum();
    let gen_vals: Vec<f64> = (0..=slice)
        .map(|s| p.integrate(s, |m, x1, xt| phi.generator(&model.drift, m, &full_x(x1, xt, d)[..d])))
        .collect();
    let generator = sigma_trapezoid(&g.times[..=slice], &gen_vals, 0.0);
    let trace_vals: Vec<f64> = (0..=slice)
        .map(|s| {
            p.integrate_trace(s, |m, xt| {
                let x = full_x(m, xt, d);
                phi.jet(m, &x[..d]).dm
            })
        })
        .collect();
    let dm0: f64 = atoms.iter().map(|a| a.w * phi.jet(a.x[0], &a.x[..d]).dm).sum();
    let limit0 = 4.0 * INV_SQRT_2PI * dm0;
    let boundary = 0.5 * sigma_trapezoid(&g.times[..=slice], &trace_vals, limit0);
    Ok(WeakTerms { lhs, initial, generator, boundary })
}

fn full_x(x1: f64, xt: &[f64], d: usize) -> [f64; MAX_DIM] {
    let mut x = [0.0; MAX_DIM];
    x[0] = x1;
    x[1..d].copy_from_slice(&xt[..d - 1]);
    x
}

/// Weak residual with a coarsened-grid error estimate. `gate_scale`
/// multiplies the estimate in the pass criterion.
pub fn weak_residual(
    p: &JointDensityGrid,
    model: &ModelSpec,
    phi: &TestFunction,
    slice: usize,
    gate_scale: f64,
) -> Result<WeakResidualReport> {
    let fine = weak_terms(p, model, phi, slice)?;
    let t = p.grid.times[slice];
    let mut deltas = [0.0; 2];
    for (k, (space, time)) in [(true, false), (false, true)].into_iter().enumerate() {
        let cg = Arc::new(p.grid.coarsen_with(space, time)?);
        let Some(cs) = cg.slice_of(t) else {
            bail!(Resolution, "slice t = {t} is not kept by the coarsened grid");
        };
        let coarse = weak_terms(&p.restrict(cg)?, model, phi, cs)?;
        // Term by term: the residual change alone can cancel to near zero.
        deltas[k] = (fine.lhs - coarse.lhs).abs()
            + (fine.initial - coarse.initial).abs()
            + (fine.generator - coarse.generator).abs()
            + (fine.boundary - coarse.boundary).abs();
    }
    let scale = fine.lhs.abs() + fine.initial.abs() + fine.generator.abs() + fine.boundary.abs();
    let error_estimate = deltas[0] + deltas[1] + 1e-13 * scale.max(1e-300);
    let residual = fine.residual();
    Ok(WeakResidualReport {
        phi_id: phi.id.clone(),
        t,
        lhs: fine.lhs,
        initial: fine.initial,
        generator: fine.generator,
        boundary: fine.boundary,
        residual,
        space_error: deltas[0],
        time_error: deltas[1],
        error_estimate,
        pass: residual.abs() <= gate_scale * error_estimate,
    })
}

/// The default battery: two profile kinds, two radii and three centers,
/// placed relative to the start so that the `m`-supports stay above it.
pub fn default_battery(model: &ModelSpec) -> Result<Vec<TestFunction>> {
    let mean = model.initial.mean();
    let base = mean[0];
    let centers = [(2.0, 0.5), (2.2, -0.3), (2.5, 1.0)];
    let mut out = Vec::with_capacity(12);
    for kind in [ProfileKind::Bump, ProfileKind::PolynomialTimesBump] {
        for radius in [1.5, 1.9] {
            for (cm, cx) in centers {
                let mut x = mean;
                x[0] = base + cx;
                let mut phi = TestFunction::with_centers(kind, base + cm, &x[..model.d], radius, 2)?;
                phi.id = alloc::format!("{}-m{:+.2}-x{:+.2}-r{radius}", kind_label(kind), cm, cx);
                out.push(phi);
            }
        }
    }
    Ok(out)
}

fn kind_label(kind: ProfileKind) -> &'static str {
    match kind {
        ProfileKind::Bump => "bump",
        ProfileKind::PolynomialTimesBump => "polybump",
    }
}

/// Runs a battery; reports are in battery order.
pub fn weak_residual_battery(
    p: &JointDensityGrid,
    model: &ModelSpec,
    battery: &[TestFunction],
    slice: usize,
    gate_scale: f64,
) -> Result<Vec<WeakResidualReport>> {
    crate::parallel::map_indexed(battery.len(), |i| weak_residual(p, model, &battery[i], slice, gate_scale))
        .into_iter()
        .collect()
}

/// Strong boundary residual at one diagonal point from a pointwise density:
/// `B(m)p − ½(∂_m + ∂_x)p − ½∂_x p` with one-sided second-order stencils
/// of step `h` taken from the interior `m > x`.
pub fn strong_boundary_residual_at<F: Fn(f64, f64) -> f64>(p: F, b: f64, m: f64, h: f64) -> f64 {
    let p0 = p(m, m);
    let dx = (3.0 * p0 - 4.0 * p(m, m - h) + p(m, m - 2.0 * h)) / (2.0 * h);
    let dm = (-3.0 * p0 + 4.0 * p(m + h, m) - p(m + 2.0 * h, m)) / (2.0 * h);
    b * p0 - 0.5 * (dm + dx) - 0.5 * dx
}

/// One diagonal node of the strong boundary residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub m: f64,
    pub residual: f64,
    /// Size of the terms being balanced, `|B p| + ½|∂_m p| + |∂_x p|`.
    pub scale: f64,
}

/// Strong boundary residual on the stored grid (`d = 1`) at every diagonal
/// node with three nodes available in both stencil directions.
pub fn strong_boundary_residual(p: &JointDensityGrid, model: &ModelSpec, slice: usize) -> Result<Vec<BoundaryPoint>> {
    let g = &p.grid;
    if g.d != 1 {
        bail!(Unsupported, "the strong boundary condition is checked in d = 1 only");
    }
    let v = &p.values[slice];
    let mut out = Vec::new();
    for im in 0..g.n_m() {
        let Some(ix) = g.diag_ix(im) else { continue };
        if ix < 2 || im + 2 >= g.n_m() {
            continue;
        }
        let m = g.m_at(im);
        let at = |a: usize, b: usize| v[g.idx(a, b, 0)];
        let p0 = at(im, ix);
        let dx = (3.0 * p0 - 4.0 * at(im, ix - 1) + at(im, ix - 2)) / (2.0 * g.h);
        let dm = (-3.0 * p0 + 4.0 * at(im + 1, ix) - at(im + 2, ix)) / (2.0 * g.h);
        let bp = model.drift.eval1(m) * p0;
        out.push(BoundaryPoint { m, residual: bp - 0.5 * (dm + dx) - 0.5 * dx, scale: bp.abs() + 0.5 * dm.abs() + dx.abs() });
    }
    if out.is_empty() {
        bail!(Resolution, "no diagonal node has three interior nodes on both sides");
    }
    Ok(out)
}

/// Norms of the three membership items on one grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembershipNorms {
    /// `sup_t ∫(∫_{m≥x¹}|p| dm)² dx`.
    pub item_a: f64,
    /// `∫₀ᵀ (∫|p(x¹, x¹, x̃; s)|² dx)^{1/2} ds`.
    pub item_b: f64,
    /// `∫₀ᵀ ‖p(x, x; s) − ℓ(x; s)‖_{L²} ds / item_b`, where `ℓ` is the
    /// one-sided linear extrapolation of the interior onto the diagonal.
    pub item_c_gap: f64,
    /// `∫₀ᵀ sup_m |p(m, m; s)| ds`.
    pub item_c_sup: f64,
    /// Power `β` in `(∫|p(x,x;s)|²)^{1/2} ≈ C s^β` over the first slices.
    pub trace_exponent: f64,
}

/// Membership diagnostic with its refinement comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipReport {
    pub fine: MembershipNorms,
    pub coarse: MembershipNorms,
    /// Items whose value grows by more than 25% from the coarse to the fine grid.
    pub flagged: Vec<String>,
}

impl MembershipReport {
    pub fn stable(&self) -> bool {
        self.flagged.is_empty()
    }
}

fn membership_norms(p: &JointDensityGrid) -> MembershipNorms {
    let g = &p.grid;
    let ne = g.n_extra();
    let mut item_a: f64 = 0.0;
    let mut trace_l2 = Vec::with_capacity(g.n_slices());
    let mut trace_sup = Vec::with_capacity(g.n_slices());
    let mut gaps = Vec::with_capacity(g.n_slices());
    for s in 0..g.n_slices() {
        let v = &p.values[s];
        // item (a): column integrals over m ≥ x¹
        let mut acc = 0.0;
        for ix in 0..g.n_x() {
            for e in 0..ne {
                let mut col = 0.0;
                for im in 0..g.n_m() {
                    if g.is_active(im, ix) && g.row_end(im).is_some_and(|end| ix <= end) {
                        col += g.area_weight(im, ix) * v[g.idx(im, ix, e)].abs();
                    }
                }
                col /= g.h;
                acc += g.h * g.extra_weight(e) * col * col;
            }
        }
        item_a = item_a.max(acc);
        // item (b) and (c) from the trace
        let tr = &p.trace[s];
        let mut l2 = 0.0;
        let mut gap2 = 0.0;
        let mut sup: f64 = 0.0;
        for im in 0..g.n_m() {
            let w = g.diag_weight(im);
            if w == 0.0 {
                continue;
            }
            for e in 0..ne {
                let val = tr[im * ne + e];
                l2 += w * g.extra_weight(e) * val * val;
                sup = sup.max(val.abs());
                if let Some(ix) = g.diag_ix(im) {
                    if ix >= 2 {
                        let ext = 2.0 * v[g.idx(im, ix - 1, e)] - v[g.idx(im, ix - 2, e)];
                        gap2 += w * g.extra_weight(e) * (ext - val) * (ext - val);
                    }
                }
            }
        }
        trace_l2.push(l2.sqrt());
        gaps.push(gap2.sqrt());
        trace_sup.push(sup);
    }
    // power-law start for the trace norm, fitted on the first two slices
    let (beta, c) = power_fit(&g.times, &trace_l2);
    let t1 = g.times[0];
    let head = if beta > -1.0 && c.is_finite() { c * t1.powf(beta + 1.0) / (beta + 1.0) } else { f64::INFINITY };
    let item_b = head + trapezoid_from_first(&g.times, &trace_l2);
    let (beta_s, c_s) = power_fit(&g.times, &trace_sup);
    let head_s = if beta_s > -1.0 && c_s.is_finite() { c_s * t1.powf(beta_s + 1.0) / (beta_s + 1.0) } else { f64::INFINITY };
    let item_c_sup = head_s + trapezoid_from_first(&g.times, &trace_sup);
    MembershipNorms {
        item_a,
        item_b: if trace_l2.iter().all(|v| *v == 0.0) { 0.0 } else { item_b },
        item_c_gap: if item_b > 0.0 && item_b.is_finite() { trapezoid_from_first(&g.times, &gaps) / item_b } else { 0.0 },
        item_c_sup: if trace_sup.iter().all(|v| *v == 0.0) { 0.0 } else { item_c_sup },
        trace_exponent: beta,
    }
}

fn power_fit(times: &[f64], vals: &[f64]) -> (f64, f64) {
    if times.len() < 2 || vals[0] <= 0.0 || vals[1] <= 0.0 {
        return (0.0, 0.0);
    }
    let beta = (vals[1] / vals[0]).ln() / (times[1] / times[0]).ln();
    (beta, vals[0] / times[0].powf(beta))
}

/// Trapezoid in `σ` from the first slice on.
fn trapezoid_from_first(times: &[f64], vals: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 1..times.len() {
        let (s0, s1) = (times[i - 1].sqrt(), times[i].sqrt());
        acc += 0.5 * (s1 - s0) * (2.0 * s0 * vals[i - 1] + 2.0 * s1 * vals[i]);
    }
    acc
}

/// Membership items on `p` and on its restriction to the coarsened grid.
pub fn x_membership(p: &JointDensityGrid) -> Result<MembershipReport> {
    let fine = membership_norms(p);
    let coarse = membership_norms(&p.restrict(Arc::new(p.grid.coarsen()?))?);
    let mut flagged = Vec::new();
    let grows = |f: f64, c: f64| !f.is_finite() || f > 1.25 * c + 1e-12;
    if grows(fine.item_a, coarse.item_a) {
        flagged.push("a".into());
    }
    if grows(fine.item_b, coarse.item_b) {
        flagged.push("b".into());
    }
    if grows(fine.item_c_sup, coarse.item_c_sup) || fine.item_c_gap > 0.1 || grows(fine.item_c_gap, coarse.item_c_gap.max(1e-3)) {
        flagged.push("c".into());
    }
    Ok(MembershipReport { fine, coarse, flagged })
}

/// Time nodes over `[0, t_k]` on panels between stored slices, linear in
/// `σ` inside each panel; the last panel uses `σ = σ_k − Δσ·w²`.
fn panel_nodes(times: &[f64], k: usize, rule: &Rule, last: &Rule) -> Vec<(usize, f64, f64, f64)> {
    // (panel, τ, weight in ds, λ within panel)
    let sk = times[k].sqrt();
    let mut out = Vec::new();
    for p in 0..=k {
        let a = if p == 0 { 0.0 } else { times[p - 1].sqrt() };
        let b = times[p].sqrt();
        let ds = b - a;
        if p == k {
            for (z, w) in last.nodes.iter().zip(&last.weights) {
                let v = 0.5 * (1.0 + z);
                let gap = ds * v * v;
                let sg = sk - gap;
                out.push((p, gap * (sk + sg), 2.0 * sg * 0.5 * w * 2.0 * ds * v, (sg - a) / ds));
            }
        } else {
            for (z, w) in rule.nodes.iter().zip(&rule.weights) {
                let sg = a + 0.5 * ds * (1.0 + z);
                out.push((p, (sk - sg) * (sk + sg), 2.0 * sg * 0.5 * ds * w, (sg - a) / ds));
            }
        }
    }
    out
}

/// `−½ ∫₀^{t_k} K(t_k − s) q(s) ds` for a profile `q` given at the slices
/// with `q(0) = 0`, piecewise linear in `σ`.
fn volterra_apply<K: Fn(f64) -> f64>(times: &[f64], q: &[f64], k: usize, kernel: &K) -> f64 {
    let rule = Rule::gauss_legendre(8);
    let last = Rule::gauss_legendre(16);
    let mut acc = 0.0;
    for (p, tau, w, lam) in panel_nodes(times, k, &rule, &last) {
        let lo = if p == 0 { 0.0 } else { q[p - 1] };
        let val = (1.0 - lam) * lo + lam * q[p];
        acc += w * kernel(tau) * val;
    }
    -0.5 * acc
}

/// One diagonal node of the Volterra identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagonalPoint {
    pub y: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// `q(y, y; t) + ½∫₀ᵗ ∂_{x¹}Γ(y, y; t − s) q(y, y; s) ds` per diagonal node
/// for `q = p1 − p2` (`d = 1`, where the `ỹ`-integral is absent).
pub fn diagonal_volterra_residual(
    p1: &JointDensityGrid,
    p2: &JointDensityGrid,
    kernel: &KernelEval,
    slice: usize,
) -> Result<Vec<DiagonalPoint>> {
    if !kernel.is_exact() {
        bail!(Unsupported, "the diagonal identity needs an exact kernel");
    }
    if *p1.grid != *p2.grid {
        bail!(Validation, "densities live on different grids");
    }
    let g = &p1.grid;
    if g.d != 1 {
        bail!(Unsupported, "the diagonal identity is evaluated in d = 1 only");
    }
    let mut out = Vec::new();
    for im in 0..g.n_m() {
        if g.diag_ix(im).is_none() {
            continue;
        }
        let y = g.m_at(im);
        let q: Vec<f64> = (0..=slice).map(|s| p1.trace[s][im] - p2.trace[s][im]).collect();
        let lhs = q[slice];
        let rhs = if q.iter().all(|v| *v == 0.0) {
            0.0
        } else {
            let kf = |tau: f64| kernel.d_gamma_dx1(&[y], &[y], tau).map(|v| v.0).unwrap_or(f64::NAN);
            volterra_apply(&g.times, &q, slice, &kf)
        };
        out.push(DiagonalPoint { y, lhs, rhs, residual: lhs - rhs });
    }
    Ok(out)
}

/// One row of the contraction replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub n: u32,
    pub norm: f64,
    pub bound: f64,
}

/// Applies the diagonal Volterra operator `n = 1..=n_max` times to the unit
/// profile on `[0, T]` at diagonal point `y` and compares with
/// `contraction_bound(n)` for `α = 1` and the fitted constant
/// `C_T = 2·sup_τ √τ |½∂_{x¹}Γ(y, y; τ)|·√(2M)`-free form (see `fitted_c_t`).
pub fn contraction_replay(kernel: &KernelEval, y: f64, horizon: f64, m_box: f64, k: usize, n_max: u32) -> Result<(f64, Vec<ReplayRow>)> {
    if !kernel.is_exact() {
        bail!(Unsupported, "the contraction replay needs an exact kernel");
    }
    let times = crate::model::sqrt_graded_times(horizon, k);
    let kf = |tau: f64| kernel.d_gamma_dx1(&[y], &[y], tau).map(|v| v.0).unwrap_or(f64::NAN);
    let c_t = fitted_c_t(&kf, horizon);
    let mut q = vec![1.0; times.len()];
    let mut rows = Vec::new();
    for n in 1..=n_max {
        // the unit profile is bounded but does not vanish at s = 0; the
        // first application uses a constant extension on the first panel
        let next: Vec<f64> = (0..times.len())
            .map(|i| if n == 1 { volterra_apply_const_head(&times, &q, i, &kf) } else { volterra_apply(&times, &q, i, &kf) })
            .collect();
        q = next;
        let norm = q.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        rows.push(ReplayRow { n, norm, bound: contraction_bound(n, 1.0, c_t, m_box, horizon, 1)? });
    }
    Ok((c_t, rows))
}

fn volterra_apply_const_head<K: Fn(f64) -> f64>(times: &[f64], q: &[f64], k: usize, kernel: &K) -> f64 {
    let rule = Rule::gauss_legendre(8);
    let last = Rule::gauss_legendre(16);
    let mut acc = 0.0;
    for (p, tau, w, lam) in panel_nodes(times, k, &rule, &last) {
        let lo = if p == 0 { q[0] } else { q[p - 1] };
        acc += w * kernel(tau) * ((1.0 - lam) * lo + lam * q[p]);
    }
    -0.5 * acc
}

/// `C_T` such that `|½∂_{x¹}Γ(y, y; τ)| ≤ (C_T/2)·τ^{-1/2}/√π` on `(0, T]`;
/// with this normalization the Volterra powers obey the contraction bound
/// with `α = 1`.
pub fn fitted_c_t<K: Fn(f64) -> f64>(kernel: &K, horizon: f64) -> f64 {
    let mut sup: f64 = 0.0;
    for i in 1..=400 {
        let tau = horizon * (i as f64 / 400.0).powi(2);
        sup = sup.max(0.5 * kernel(tau).abs() * tau.sqrt());
    }
    2.0 * sup * core::f64::consts::PI.sqrt()
}

/// Separable reordering check: `∫ q_H ℒF dx` against `∫∫ p ℒ(H⊗F)`.
pub fn fubini_check(p: &JointDensityGrid, model: &ModelSpec, phi: &TestFunction, slice: usize) -> Result<(f64, f64)> {
    check_support(p, phi)?;
    let d = p.grid.d;
    let direct = p.integrate(slice, |m, x1, xt| phi.generator(&model.drift, m, &full_x(x1, xt, d)[..d]));
    let qh = q_h(p, &HWeight::Profile(phi.h), slice);
    let reordered = integrate_x(&p.grid, &qh, |x| phi.generator_f(&model.drift, x));
    Ok((direct, reordered))
}

/// `q_H(x) = ∫_{m≥x¹} H(m) q(m, x) dm` at the `(x¹, x̃)` nodes, using the
/// same weights as the area rule so that reordered sums agree exactly.
pub fn q_h(q: &JointDensityGrid, h: &HWeight, slice: usize) -> Vec<f64> {
    let g = &q.grid;
    let ne = g.n_extra();
    let mut out = vec![0.0; g.n_x() * ne];
    for im in 0..g.n_m() {
        let Some(end) = g.row_end(im) else { continue };
        let hm = h.value(g.m_at(im));
        if hm == 0.0 {
            continue;
        }
        for ix in 0..=end {
            let w = g.area_weight(im, ix) / g.h * hm;
            for e in 0..ne {
                out[ix * ne + e] += w * q.values[slice][g.idx(im, ix, e)];
            }
        }
    }
    out
}

fn integrate_x<F: FnMut(&[f64]) -> f64>(g: &TriangularGrid, vals: &[f64], mut f: F) -> f64 {
    let ne = g.n_extra();
    let d = g.d;
    let mut x = [0.0; MAX_DIM];
    let mut acc = 0.0;
    for ix in 0..g.n_x() {
        x[0] = g.x_at(ix);
        for e in 0..ne {
            let v = vals[ix * ne + e];
            if v == 0.0 {
                continue;
            }
            g.extra_point(e, &mut x[1..d]);
            acc += g.h * g.extra_weight(e) * v * f(&x[..d]);
        }
    }
    acc
}

/// The weight `H(m)` of `q_H`: a profile, or the constant one for which the
/// boundary source vanishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HWeight {
    One,
    Profile(Profile),
}

impl HWeight {
    pub fn value(&self, m: f64) -> f64 {
        match self {
            HWeight::One => 1.0,
            HWeight::Profile(p) => p.value(m),
        }
    }
    pub fn derivative(&self, m: f64) -> f64 {
        match self {
            HWeight::One => 0.0,
            HWeight::Profile(p) => p.eval(m).1,
        }
    }
}

/// Terms of the `q_H` evolution identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QhTerms {
    pub lhs: f64,
    pub generator: f64,
    pub source: f64,
    pub residual: f64,
}

/// `∫F q_H(t) − ∫₀ᵗ∫ℒF q_H − ½∫₀ᵗ∫H'(m)F(m, x̃) q(m, m, x̃; s)` for
/// `q = p1 − p2`, whose initial condition is taken to be zero.
pub fn qh_evolution_residual(
    p1: &JointDensityGrid,
    p2: &JointDensityGrid,
    model: &ModelSpec,
    h: &HWeight,
    f: &TestFunction,
    slice: usize,
) -> Result<QhTerms> {
    let q = p1.combine(1.0, p2, -1.0)?;
    check_support(&q, f)?;
    let g = &q.grid;
    let d = g.d;
    let qh_t = q_h(&q, h, slice);
    let lhs = integrate_x(g, &qh_t, |x| f.f_value(x));
    let gen_vals: Vec<f64> =
        (0..=slice).map(|s| integrate_x(g, &q_h(&q, h, s), |x| f.generator_f(&model.drift, x))).collect();
    let generator = sigma_trapezoid(&g.times[..=slice], &gen_vals, 0.0);
    let src_vals: Vec<f64> = (0..=slice)
        .map(|s| q.integrate_trace(s, |m, xt| h.derivative(m) * f.f_value(&full_x(m, xt, d)[..d])))
        .collect();
    let source = 0.5 * sigma_trapezoid(&g.times[..=slice], &src_vals, 0.0);
    Ok(QhTerms { lhs, generator, source, residual: lhs - generator - source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::exact_density;
    use crate::dual::KernelMode;
    use crate::model::{build_model, sqrt_graded_times, Drift, DriftSpec, Initial, InitialSpec, Provenance};
    use crate::quad::integrate_adaptive_2d;

    fn model(drift: DriftSpec, width: f64) -> ModelSpec {
        build_model(Drift::Known(drift), Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width }), 1).unwrap()
    }

    fn grid(n: usize, k: usize) -> Arc<TriangularGrid> {
        Arc::new(TriangularGrid::boxed(1, 5.0, n, 1, sqrt_graded_times(1.0, k), 1.0).unwrap())
    }

    #[test]
    fn exact_brownian_battery_passes_and_converges() {
        let m = model(DriftSpec::Zero, 1e-3);
        let battery = default_battery(&m).unwrap();
        let mut worst = Vec::new();
        for (n, k) in [(81, 16), (161, 32), (321, 64)] {
            let g = grid(n, k);
            let p = exact_density(&m, g.clone()).unwrap();
            let reps = weak_residual_battery(&p, &m, &battery, g.n_slices() - 1, 1.0).unwrap();
            for r in &reps {
                assert!(r.pass, "{r:?}");
            }
            worst.push(reps.iter().map(|r| r.residual.abs()).fold(0.0, f64::max));
        }
        let orders: Vec<f64> = worst.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        assert!(orders.iter().all(|o| *o >= 1.8), "{worst:?} {orders:?}");
    }

    #[test]
    fn drifted_density_battery_passes() {
        let m = model(DriftSpec::Constant { mu: vec![0.5] }, 1e-3);
        let g = grid(161, 32);
        let p = exact_density(&m, g.clone()).unwrap();
        for r in weak_residual_battery(&p, &m, &default_battery(&m).unwrap(), g.n_slices() - 1, 1.0).unwrap() {
            assert!(r.pass, "{r:?}");
            assert!(r.residual.abs() < 1e-3);
        }
    }

    #[test]
    fn support_outside_box_is_rejected() {
        let m = model(DriftSpec::Zero, 1e-3);
        let g = grid(41, 4);
        let p = exact_density(&m, g).unwrap();
        let phi = TestFunction::make(ProfileKind::Bump, 4.5, 1.0, 2, 1).unwrap();
        assert!(matches!(weak_terms(&p, &m, &phi, 3), Err(crate::Error::Support(_))));
    }

    #[test]
    fn interior_bump_shifts_residual_linearly() {
        let m = model(DriftSpec::Zero, 1e-3);
        let g = grid(161, 16);
        let p = exact_density(&m, g.clone()).unwrap();
        let phi = &default_battery(&m).unwrap()[0];
        let bump = |mm: f64, x: f64| {
            let r2 = ((mm - 1.2) / 0.4).powi(2) + ((x - 0.4) / 0.4).powi(2);
            if r2 < 1.0 { (-1.0 / (1.0 - r2)).exp() } else { 0.0 }
        };
        let delta = 0.01;
        let pert = JointDensityGrid::from_fn(g.clone(), Provenance::Exact, |_, mm, x| delta * bump(mm, x[0]));
        let q = p.combine(1.0, &pert, 1.0).unwrap();
        let last = g.n_slices() - 1;
        let shift = weak_terms(&q, &m, phi, last).unwrap().residual() - weak_terms(&p, &m, phi, last).unwrap().residual();
        let t = g.times[last];
        let a = integrate_adaptive_2d(|mm, x| bump(mm, x) * phi.value(mm, &[x]), (0.8, 1.6), (0.0, 0.8), 1e-12).unwrap();
        let b = integrate_adaptive_2d(|mm, x| bump(mm, x) * phi.generator(&m.drift, mm, &[x]), (0.8, 1.6), (0.0, 0.8), 1e-12).unwrap();
        let expected = delta * (a - t * b);
        assert!((shift - expected).abs() < 1e-3 * delta, "{shift} vs {expected}");
    }

    #[test]
    fn residual_is_affine_in_density() {
        let m = model(DriftSpec::Constant { mu: vec![0.3] }, 1e-3);
        let g = grid(81, 8);
        let p1 = exact_density(&m, g.clone()).unwrap();
        let p2 = exact_density(&model(DriftSpec::Zero, 1e-3), g.clone()).unwrap();
        let phi = &default_battery(&m).unwrap()[4];
        let a = 0.3;
        let mix = p1.combine(a, &p2, 1.0 - a).unwrap();
        let r = |p: &JointDensityGrid| weak_terms(p, &m, phi, 7).unwrap().residual();
        assert!((r(&mix) - (a * r(&p1) + (1.0 - a) * r(&p2))).abs() < 1e-13);
    }

    #[test]
    fn strong_boundary_vanishes_for_brownian_closed_form() {
        // symbolic: ∂_m p = 2g', ∂_x p = −g' on the diagonal, so ½(2g' − g') − ½g' = 0
        let t = 0.7;
        let p = |m: f64, x: f64| crate::brownian::bm_joint_density_unchecked(m, &[x], t, &[0.0]);
        let h = 1e-3;
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let y = 0.01 + 3.0 * i as f64 / 1000.0;
            worst = worst.max(strong_boundary_residual_at(p, 0.0, y, h).abs());
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn strong_boundary_converges_for_drifted_density() {
        let m = model(DriftSpec::Constant { mu: vec![0.5] }, 1e-3);
        let mut errs = Vec::new();
        for n in [81, 161, 321] {
            let p = exact_density(&m, grid(n, 8)).unwrap();
            let prof = strong_boundary_residual(&p, &m, 7).unwrap();
            errs.push(prof.iter().filter(|b| b.m > 0.3).fold(0.0f64, |a, b| a.max(b.residual.abs())));
        }
        assert!(errs[1] < 0.5 * errs[0] && errs[2] < 0.5 * errs[1], "{errs:?}");
    }

    #[test]
    fn membership_items_are_finite_and_stable() {
        let m = model(DriftSpec::Zero, 0.5);
        let p = exact_density(&m, grid(161, 32)).unwrap();
        let rep = x_membership(&p).unwrap();
        assert!(rep.stable(), "{rep:?}");
        assert!(rep.fine.item_a.is_finite() && rep.fine.item_b.is_finite() && rep.fine.item_c_sup.is_finite());
        // trace L² norm behaves like C/√s for an L² start
        assert!((rep.fine.trace_exponent + 0.5).abs() < 0.1, "{}", rep.fine.trace_exponent);
    }

    #[test]
    fn manufactured_violation_is_flagged() {
        let m = model(DriftSpec::Zero, 0.5);
        let g = grid(161, 32);
        let p = exact_density(&m, g.clone()).unwrap();
        let h = g.h;
        let bad = JointDensityGrid::from_fn(g.clone(), Provenance::Exact, |s, mm, x| {
            let im = ((mm - g.m_at(0)) / h).round() as usize;
            let ix = ((x[0] - g.x_at(0)) / h).round() as usize;
            p.values[s][g.idx(im, ix, 0)] / (mm - x[0]).max(0.25 * h).sqrt()
        });
        let rep = x_membership(&bad).unwrap();
        assert!(!rep.stable(), "{rep:?}");
    }

    #[test]
    fn zero_density_has_zero_norms() {
        let g = grid(41, 8);
        let z = JointDensityGrid::zeros(g, Provenance::Exact);
        let rep = x_membership(&z).unwrap();
        assert_eq!(rep.fine.item_a, 0.0);
        assert_eq!(rep.fine.item_b, 0.0);
        assert_eq!(rep.fine.item_c_sup, 0.0);
    }

    #[test]
    fn diagonal_identity_trivial_cases() {
        let m = model(DriftSpec::Constant { mu: vec![0.5] }, 1e-3);
        let g = grid(81, 8);
        let p = exact_density(&m, g.clone()).unwrap();
        let kernel = KernelEval::new(&m, KernelMode::ExactConstantDrift).unwrap();
        for pt in diagonal_volterra_residual(&p, &p, &kernel, 7).unwrap() {
            assert_eq!(pt.residual, 0.0);
        }
        // interior-only perturbation leaves the diagonal untouched
        let bump = JointDensityGrid::from_fn(g.clone(), Provenance::Exact, |_, mm, x| {
            if mm - x[0] > 0.5 && (mm - 1.5).abs() < 0.5 { 0.1 } else { 0.0 }
        });
        let q = p.combine(1.0, &bump, 1.0).unwrap();
        for pt in diagonal_volterra_residual(&p, &q, &kernel, 7).unwrap() {
            assert_eq!((pt.lhs, pt.rhs), (0.0, 0.0));
        }
        let mc = KernelEval::new(&m, KernelMode::McEstimate).unwrap();
        assert!(matches!(diagonal_volterra_residual(&p, &p, &mc, 7), Err(crate::Error::Unsupported(_))));
    }

    #[test]
    fn replay_stays_below_contraction_bound() {
        let m = model(DriftSpec::Constant { mu: vec![0.5] }, 1e-3);
        let kernel = KernelEval::new(&m, KernelMode::ExactConstantDrift).unwrap();
        let (c_t, rows) = contraction_replay(&kernel, 0.0, 1.0, 5.0, 64, 10).unwrap();
        assert!(c_t > 0.0);
        for r in rows {
            assert!(r.norm <= r.bound, "{r:?}");
        }
    }

    #[test]
    fn fubini_reordering_is_exact() {
        let m = model(DriftSpec::Tanh { amplitude: 1.0, scale: 1.0 }, 1e-3);
        let p = exact_density(&model(DriftSpec::Zero, 1e-3), grid(81, 8)).unwrap();
        for phi in default_battery(&m).unwrap() {
            let (a, b) = fubini_check(&p, &m, &phi, 7).unwrap();
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} {b}");
        }
    }

    #[test]
    fn qh_residual_zero_for_identical_densities_and_constant_h() {
        let m = model(DriftSpec::Zero, 1e-3);
        let g = grid(81, 8);
        let p = exact_density(&m, g).unwrap();
        let f = &default_battery(&m).unwrap()[0];
        let h = HWeight::Profile(Profile::new(ProfileKind::Bump, 1.0, 1.0, 2).unwrap());
        let r = qh_evolution_residual(&p, &p, &m, &h, f, 7).unwrap();
        assert_eq!(r.residual, 0.0);
        let r1 = qh_evolution_residual(&p, &p, &m, &HWeight::One, f, 7).unwrap();
        assert_eq!(r1.source, 0.0);
    }
}

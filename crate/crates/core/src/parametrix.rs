//! Parametrix solver for the joint density of `(M_t, X_t)` under a general
//! bounded drift (one dimension).
//!
//! Duhamel's formula around Brownian motion with its running maximum gives
//! `p = p₀ + A[p] + Bβ[p]` with, for `τ = t - s` and `c₂ = 2m - x`,
//!
//! ```text
//! A[p](m,x;t)  = ∫₀ᵗ ds ∫_{a<m} da B(a) S(m,a;s) · 2φ''(a - c₂; τ),   S(m,a;s) = ∫_{a≤b<m} p(b,a;s) db
//! Bβ[p](m,x;t) = ∫₀ᵗ ds ∫_{a<m} da B(a) p(m,a;s) · [φ'(a - x; τ) - φ'(a - c₂; τ)]
//! ```
//!
//! The first term moves mass through a new maximum, the second transports
//! it below an unchanged maximum with the kernel killed at `m`. Both are the
//! start-derivatives of the Brownian transition of `(M, X)`, summed over the
//! coordinates `m` and `x¹` (with `B^m = B^1`).
//!
//! The solver iterates on `D = p - p₀`: `D ← R₀ + L[D]` with
//! `R₀ = (A + Bβ)[p₀]`. `L` uses product integration: `B·S` and `B·p` are
//! taken piecewise linear in `a` on the lattice and piecewise linear in `√s`
//! between slices, and every kernel moment is integrated exactly, so narrow
//! kernels at small `τ` cost nothing extra. `R₀` is computed in closed form
//! in `a` (products of Gaussians) wherever the grid cannot resolve `p₀`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::brownian::{gaussian_start_factor, p0_seed};
use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::kernels::contraction_bound_log;
use crate::model::{
    sqrt_graded_times, DriftKind, Initial, InitialSpec, JointDensityGrid, ModelSpec, Provenance, TriangularGrid,
};
use crate::quad::Rule;
use crate::special::{gauss1, norm_cdf, INV_SQRT_2PI};

/// Discretization and stopping settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub max_iter: usize,
    /// Stop when the largest per-slice L¹ norm of an increment falls below this.
    pub tol: f64,
    /// Gauss–Legendre nodes per time panel.
    pub panel_nodes: usize,
    /// Nodes on the panel ending at the target time (after `τ = w²` substitution).
    pub last_panel_nodes: usize,
    /// Gauss–Legendre nodes for the closed-form-in-`a` seed integrals.
    pub seed_nodes: usize,
    /// The seed correction is done in closed form while `√s` is below this
    /// many lattice steps.
    pub seed_cells: f64,
    /// Smallest number of lattice steps within `√T` of the diagonal.
    pub min_layer_cells: f64,
    /// Fallback exponent for the contraction bound when too few increments
    /// are available to fit one.
    pub alpha: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iter: 40,
            tol: 1e-9,
            panel_nodes: 6,
            last_panel_nodes: 12,
            seed_nodes: 20,
            seed_cells: 4.0,
            min_layer_cells: 4.0,
            alpha: 1.0,
        }
    }
}

/// Current Picard iterate.
#[derive(Debug, Clone)]
pub struct VolterraIterate {
    pub density: JointDensityGrid,
    /// `p - p₀` per slice.
    pub correction: Vec<Vec<f64>>,
    pub n: usize,
    pub increment_sup: f64,
    pub increment_l1: f64,
}

/// Per-iteration diagnostics of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub converged: bool,
    pub increments_l1: Vec<f64>,
    pub increments_sup: Vec<f64>,
    /// `δ_{n+1}/δ_n` of the L¹ increments.
    pub observed_ratios: Vec<f64>,
    /// Contraction bound `b_n` with the fitted constant, `n = 1, 2, …`.
    pub bound: Vec<f64>,
    pub bound_ratios: Vec<f64>,
    pub fitted_c_t: f64,
    pub alpha: f64,
    /// Index from which every observed ratio stays below the bound ratio.
    pub dominated_from: Option<usize>,
    pub mass: Vec<f64>,
    pub min_value: f64,
    /// Most negative value relative to the slice maximum, over slices whose
    /// `√t` spans at least `seed_cells` lattice steps.
    pub min_relative_resolved: f64,
    /// Reflection-principle bound on the mass leaving the box.
    pub escape_bound: f64,
}

/// Kernel weight tables for one (target level, source level) pair.
#[derive(Debug, Clone, Default)]
struct PairTables {
    /// `φ'` against a full hat and against the left half-hat.
    w1f: Vec<f64>,
    w1l: Vec<f64>,
    /// `2φ''` against a full hat and the left half-hat.
    w2f: Vec<f64>,
    w2l: Vec<f64>,
}

impl PairTables {
    fn zeros(n: usize) -> Self {
        PairTables { w1f: vec![0.0; n], w1l: vec![0.0; n], w2f: vec![0.0; n], w2l: vec![0.0; n] }
    }
}

/// One time-quadrature node: panel, `σ = √s`, weight in `ds`, position in panel.
#[derive(Debug, Clone, Copy)]
struct TimeNode {
    panel: usize,
    s: f64,
    tau: f64,
    weight: f64,
    lambda: f64,
}

/// Precomputed operator for one model and grid.
pub struct Parametrix {
    pub model: ModelSpec,
    pub grid: Arc<TriangularGrid>,
    pub settings: SolverSettings,
    seed: JointDensityGrid,
    seed_sub: Vec<Vec<f64>>,
    r0: Vec<Vec<f64>>,
    /// `σ` at levels `0..=K` (level 0 is `t = 0`).
    sigma: Vec<f64>,
    /// First level whose seed is resolved on the grid.
    cut: usize,
    o_min: i64,
    full: Vec<PairTables>,
    down: Vec<PairTables>,
    drift_at: Vec<f64>,
}

#[inline]
fn pair_index(kk: usize, l: usize) -> usize {
    kk * (kk - 1) / 2 + l - 1
}

/// Escape mass allowed by the default box choice.
pub const BOX_ESCAPE_TOL: f64 = 1e-8;

/// Smallest symmetric box around `center` whose escape mass under the
/// reflection bound `4Φ(-(M - |center| - |B|T)/√T)` is below `tol`.
pub fn reflection_box(center: f64, horizon: f64, drift_bound: f64, tol: f64) -> f64 {
    let mut m = center.abs() + drift_bound * horizon + 0.5;
    while reflection_escape(m, center, horizon, drift_bound) >= tol {
        m += 0.05;
    }
    m
}

pub fn reflection_escape(m_box: f64, center: f64, horizon: f64, drift_bound: f64) -> f64 {
    let reach = m_box - center.abs() - drift_bound * horizon;
    if reach <= 0.0 {
        return 1.0;
    }
    4.0 * norm_cdf(-reach / horizon.sqrt())
}

/// Grid of `n` lattice nodes per axis and `k` slices uniform in `√t`, on a
/// box losing less than `1e-6` of the mass.
pub fn grid_for(model: &ModelSpec, n: usize, k: usize, horizon: f64) -> Result<Arc<TriangularGrid>> {
    if model.d != 1 {
        bail!(Unsupported, "the parametrix solver handles d = 1 only");
    }
    let center = model.initial.mean()[0];
    let m_box = reflection_box(center, horizon, model.drift_bound, BOX_ESCAPE_TOL);
    Ok(Arc::new(TriangularGrid::boxed(1, m_box, n, 1, sqrt_graded_times(horizon, k), horizon)?))
}

/// Hat-function moments of `φ'` and `φ''` at lattice offsets for one `τ`.
fn kernel_moments(tau: f64, h: f64, o_min: i64, len: usize, out: &mut [[f64; 4]]) {
    // F0, F1 antiderivatives at z = o·h for o in o_min-1 ..= o_min+len
    let sd = tau.sqrt();
    let npts = len + 2;
    let mut f = vec![[0.0f64; 4]; npts];
    for (q, slot) in f.iter_mut().enumerate() {
        let o = o_min - 1 + q as i64;
        let z = o as f64 * h;
        let u = z / sd;
        let ph = if u.abs() > 40.0 { 0.0 } else { INV_SQRT_2PI / sd * (-0.5 * u * u).exp() };
        let cdf = norm_cdf(u);
        let dph = -z / tau * ph;
        // φ': F0 = φ, F1 = zφ - Φ;  φ'': F0 = φ', F1 = zφ' - φ
        *slot = [ph, z * ph - cdf, dph, z * dph - ph];
    }
    for (q, w) in out.iter_mut().enumerate().take(len) {
        let o = (o_min + q as i64) as f64;
        let (lo, mid, hi) = (&f[q], &f[q + 1], &f[q + 2]);
        let left1 = (mid[1] - lo[1]) / h - (o - 1.0) * (mid[0] - lo[0]);
        let right1 = (o + 1.0) * (hi[0] - mid[0]) - (hi[1] - mid[1]) / h;
        let left2 = (mid[3] - lo[3]) / h - (o - 1.0) * (mid[2] - lo[2]);
        let right2 = (o + 1.0) * (hi[2] - mid[2]) - (hi[3] - mid[3]) / h;
        *w = [left1 + right1, left1, 2.0 * (left2 + right2), 2.0 * left2];
    }
}

impl Parametrix {
    /// Builds kernel tables, the seed `p₀` and the seed correction `R₀`.
    pub fn new(model: &ModelSpec, grid: Arc<TriangularGrid>, settings: SolverSettings) -> Result<Self> {
        if model.d != 1 || grid.d != 1 {
            bail!(Unsupported, "the parametrix solver handles d = 1 only");
        }
        let horizon = *grid.times.last().expect("validated grid");
        if grid.h * settings.min_layer_cells > horizon.sqrt() {
            bail!(
                Resolution,
                "lattice step {} leaves fewer than {} cells within √T = {} of the diagonal",
                grid.h,
                settings.min_layer_cells,
                horizon.sqrt()
            );
        }
        let seed = p0_seed(model, grid.clone())?;
        let k = grid.n_slices();
        let mut sigma = vec![0.0];
        sigma.extend(grid.times.iter().map(|t| t.sqrt()));
        let cut = (1..=k).find(|&l| sigma[l] >= settings.seed_cells * grid.h).unwrap_or(k + 1);
        let o_min = 2 * grid.x_lo - 2 * grid.m_hi - 1;
        let o_max = grid.x_hi - grid.x_lo + 1;
        let len = (o_max - o_min + 1) as usize;
        let drift_at: Vec<f64> = (0..grid.n_x()).map(|ix| model.drift.eval1(grid.x_at(ix))).collect();
        let mut this = Parametrix {
            model: model.clone(),
            grid: grid.clone(),
            settings,
            seed_sub: Vec::new(),
            seed,
            r0: vec![vec![0.0; grid.slice_len()]; k],
            sigma,
            cut,
            o_min,
            full: Vec::new(),
            down: Vec::new(),
            drift_at,
        };
        if model.drift_kind == DriftKind::Zero {
            return Ok(this);
        }
        this.build_tables(len);
        this.seed_sub = this.seed_sub_mass_grid();
        this.r0 = this.seed_correction()?;
        Ok(this)
    }

    pub fn seed(&self) -> &JointDensityGrid {
        &self.seed
    }

    /// Quadrature nodes over `[0, t_kk]` for panels `p_lo..p_hi`.
    fn time_nodes(&self, kk: usize, p_lo: usize, p_hi: usize) -> Vec<TimeNode> {
        let gl = Rule::gauss_legendre(self.settings.panel_nodes);
        let gl_last = Rule::gauss_legendre(self.settings.last_panel_nodes);
        let sk = self.sigma[kk];
        let mut out = Vec::new();
        for p in p_lo..p_hi.min(kk) {
            let (a, b) = (self.sigma[p], self.sigma[p + 1]);
            let ds = b - a;
            if p + 1 == kk {
                // σ = σ_k - Δσ·w², removes the (t - s)^{-1/2} singularity
                for (z, w) in gl_last.nodes.iter().zip(&gl_last.weights) {
                    let v = 0.5 * (1.0 + z);
                    let gap = ds * v * v;
                    let sg = sk - gap;
                    let jac = 0.5 * w * 2.0 * ds * v;
                    let tau = gap * (sk + sg);
                    out.push(TimeNode { panel: p, s: sg * sg, tau, weight: 2.0 * sg * jac, lambda: (sg - a) / ds });
                }
            } else {
                for (z, w) in gl.nodes.iter().zip(&gl.weights) {
                    let sg = a + 0.5 * ds * (1.0 + z);
                    let tau = (sk - sg) * (sk + sg);
                    out.push(TimeNode { panel: p, s: sg * sg, tau, weight: 2.0 * sg * 0.5 * ds * w, lambda: (sg - a) / ds });
                }
            }
        }
        out
    }

    fn build_tables(&mut self, len: usize) {
        let k = self.grid.n_slices();
        let h = self.grid.h;
        let o_min = self.o_min;
        let per_level: Vec<(Vec<PairTables>, Vec<PairTables>)> = crate::parallel::map_indexed(k, |km1| {
            let kk = km1 + 1;
            let mut full = vec![PairTables::zeros(len); kk];
            let mut down = vec![PairTables::zeros(len); kk];
            let mut mom = vec![[0.0; 4]; len];
            for node in self.time_nodes(kk, 0, kk) {
                kernel_moments(node.tau, h, o_min, len, &mut mom);
                let targets = [(node.panel, node.weight * (1.0 - node.lambda), true), (node.panel + 1, node.weight * node.lambda, false)];
                for (level, w, is_down) in targets {
                    if level == 0 || w == 0.0 {
                        continue;
                    }
                    let f = &mut full[level - 1];
                    for q in 0..len {
                        f.w1f[q] += w * mom[q][0];
                        f.w1l[q] += w * mom[q][1];
                        f.w2f[q] += w * mom[q][2];
                        f.w2l[q] += w * mom[q][3];
                    }
                    if is_down {
                        let d = &mut down[level - 1];
                        for q in 0..len {
                            d.w1f[q] += w * mom[q][0];
                            d.w1l[q] += w * mom[q][1];
                            d.w2f[q] += w * mom[q][2];
                            d.w2l[q] += w * mom[q][3];
                        }
                    }
                }
            }
            (full, down)
        });
        for (f, d) in per_level {
            self.full.extend(f);
            self.down.extend(d);
        }
    }

    /// `S₀(m, a; t)` at the grid nodes, per slice.
    fn seed_sub_mass_grid(&self) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let model = &self.model;
        g.times
            .iter()
            .map(|&t| {
                let mut v = vec![0.0; g.slice_len()];
                for im in 0..g.n_m() {
                    let Some(end) = g.row_end(im) else { continue };
                    let m = g.m_at(im);
                    for ix in 0..=end {
                        v[g.idx(im, ix, 0)] = seed_sub_mass(model, m, g.x_at(ix), t);
                    }
                }
                v
            })
            .collect()
    }

    /// Sub-diagonal masses `S(m, a) = ∫_a^m p(b, a) db` of one slice, trapezoid in `b`.
    fn sub_mass(&self, vals: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let mut s = vec![0.0; g.slice_len()];
        for ix in 0..g.n_x() {
            let la = g.x_lo + ix as i64;
            if la < g.m_lo || la > g.m_hi {
                continue;
            }
            let start = (la - g.m_lo) as usize;
            let mut acc = 0.0;
            for im in start + 1..g.n_m() {
                acc += 0.5 * g.h * (vals[g.idx(im - 1, ix, 0)] + vals[g.idx(im, ix, 0)]);
                s[g.idx(im, ix, 0)] = acc;
            }
        }
        s
    }

    /// Applies the α and/or β parts of `L` to per-slice values `p` and their
    /// sub-diagonal masses `s`. Source levels below `first` are skipped, and
    /// level `first` only contributes its forward panel when `first > 1`.
    fn apply_op(&self, p: &[Vec<f64>], s: &[Vec<f64>], alpha: bool, beta: bool, first: usize) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let k = g.n_slices();
        let nx = g.n_x();
        let o_min = self.o_min;
        let rows = crate::parallel::map_indexed(g.n_m(), |im| {
            let mut out = vec![vec![0.0; nx]; k];
            let Some(end) = g.row_end(im) else { return out };
            let lm = g.m_lo + im as i64;
            let top_is_diag = g.x_lo + end as i64 == lm;
            // G vectors per source level
            let mut ga: Vec<Vec<f64>> = Vec::with_capacity(k);
            let mut gb: Vec<Vec<f64>> = Vec::with_capacity(k);
            let mut any = vec![false; k];
            for l in 0..k {
                let base = g.idx(im, 0, 0);
                let a: Vec<f64> = (0..=end).map(|ix| if alpha { self.drift_at[ix] * s[l][base + ix] } else { 0.0 }).collect();
                let b: Vec<f64> = (0..=end).map(|ix| if beta { self.drift_at[ix] * p[l][base + ix] } else { 0.0 }).collect();
                any[l] = a.iter().any(|v| *v != 0.0) || b.iter().any(|v| *v != 0.0);
                ga.push(a);
                gb.push(b);
            }
            if !any.iter().any(|v| *v) {
                return out;
            }
            for kk in 1..=k {
                let row = &mut out[kk - 1];
                let lo = first.max(1);
                for l in lo..=kk {
                    if !any[l - 1] {
                        continue;
                    }
                    let tabs = if l == first && first > 1 { &self.down[pair_index(kk, l)] } else { &self.full[pair_index(kk, l)] };
                    let ga = &ga[l - 1];
                    let gb = &gb[l - 1];
                    for ix in 0..=end {
                        let lx = g.x_lo + ix as i64;
                        let lc2 = 2 * lm - lx;
                        let off_c2 = (g.x_lo - lc2 - o_min) as usize;
                        let off_x = (g.x_lo - lx - o_min) as usize;
                        let mut acc = 0.0;
                        if alpha {
                            acc += dot(ga, &tabs.w2f[off_c2..off_c2 + end + 1]);
                        }
                        if beta {
                            acc += dot(gb, &tabs.w1f[off_x..off_x + end + 1]) - dot(gb, &tabs.w1f[off_c2..off_c2 + end + 1]);
                        }
                        if top_is_diag {
                            let tx = off_x + end;
                            let tc = off_c2 + end;
                            if alpha {
                                acc += ga[end] * (tabs.w2l[tc] - tabs.w2f[tc]);
                            }
                            if beta {
                                acc += gb[end] * ((tabs.w1l[tx] - tabs.w1f[tx]) - (tabs.w1l[tc] - tabs.w1f[tc]));
                            }
                        }
                        row[ix] += acc;
                    }
                }
            }
            out
        });
        let mut res = vec![vec![0.0; g.slice_len()]; k];
        for (im, r) in rows.into_iter().enumerate() {
            for (sl, vals) in r.into_iter().enumerate() {
                let base = g.idx(im, 0, 0);
                res[sl][base..base + nx].copy_from_slice(&vals);
            }
        }
        res
    }

    /// `R₀ = (A + Bβ)[p₀]`.
    fn seed_correction(&self) -> Result<Vec<Vec<f64>>> {
        let g = &self.grid;
        let k = g.n_slices();
        // resolved part: levels from `cut` on, through the tables
        let mut r0 = if self.cut <= k {
            self.apply_op(&self.seed.values, &self.seed_sub, true, true, self.cut)
        } else {
            vec![vec![0.0; g.slice_len()]; k]
        };
        // closed form in `a` for panels below the cut
        let rule = Rule::gauss_legendre(self.settings.seed_nodes);
        let h = g.h;
        let analytic: Vec<Vec<(usize, f64)>> = crate::parallel::map_indexed(g.n_m(), |im| {
            let mut vals = Vec::new();
            let Some(end) = g.row_end(im) else { return vals };
            let m = g.m_at(im);
            let atoms = seed_atoms(&self.model, m, h);
            if atoms.is_empty() {
                return vals;
            }
            for kk in 1..=k {
                let nodes = self.time_nodes(kk, 0, self.cut);
                for ix in 0..=end {
                    let x = g.x_at(ix);
                    let mut acc = 0.0;
                    for nd in &nodes {
                        let mut v = 0.0;
                        for &(x0, w) in &atoms {
                            v += w * seed_integrand(&self.model, m, x, nd.s, nd.tau, x0, &rule);
                        }
                        acc += nd.weight * v;
                    }
                    vals.push((kk - 1, acc));
                }
            }
            vals
        });
        for (im, vals) in analytic.into_iter().enumerate() {
            let Some(end) = g.row_end(im) else { continue };
            let mut it = vals.into_iter();
            for kk in 1..=k {
                for ix in 0..=end {
                    if let Some((sl, v)) = it.next() {
                        debug_assert_eq!(sl, kk - 1);
                        r0[sl][g.idx(im, ix, 0)] += v;
                    }
                }
            }
        }
        Ok(r0)
    }

    /// `A[p]` on the grid for the values of a density (all coordinates
    /// `k = m, x¹` summed).
    pub fn apply_alpha_term(&self, iterate: &JointDensityGrid) -> Result<JointDensityGrid> {
        self.check_grid(iterate)?;
        let s: Vec<Vec<f64>> = iterate.values.iter().map(|v| self.sub_mass(v)).collect();
        Ok(self.wrap(self.apply_if_drift(&iterate.values, &s, true, false)))
    }

    /// `Bβ[p]` on the grid.
    pub fn apply_beta_term(&self, iterate: &JointDensityGrid) -> Result<JointDensityGrid> {
        self.check_grid(iterate)?;
        Ok(self.wrap(self.apply_if_drift(&iterate.values, &iterate.values, false, true)))
    }

    /// The seed correction `R₀`, i.e. the first Picard increment.
    pub fn seed_increment(&self) -> JointDensityGrid {
        self.wrap(self.r0.clone())
    }

    fn apply_if_drift(&self, p: &[Vec<f64>], s: &[Vec<f64>], alpha: bool, beta: bool) -> Vec<Vec<f64>> {
        if self.model.drift_kind == DriftKind::Zero {
            return vec![vec![0.0; self.grid.slice_len()]; self.grid.n_slices()];
        }
        self.apply_op(p, s, alpha, beta, 1)
    }

    fn check_grid(&self, iterate: &JointDensityGrid) -> Result<()> {
        if *iterate.grid != *self.grid {
            bail!(Validation, "iterate lives on a different grid");
        }
        Ok(())
    }

    fn wrap(&self, values: Vec<Vec<f64>>) -> JointDensityGrid {
        let mut out = JointDensityGrid { grid: self.grid.clone(), values, trace: Vec::new(), provenance: Provenance::Parametrix };
        out.trace_from_diagonal();
        out
    }

    /// One Picard map `D ↦ R₀ + L[D]`.
    pub fn step(&self, correction: &[Vec<f64>]) -> Vec<Vec<f64>> {
        if self.model.drift_kind == DriftKind::Zero {
            return self.r0.clone();
        }
        let s: Vec<Vec<f64>> = correction.iter().map(|v| self.sub_mass(v)).collect();
        let mut next = self.apply_op(correction, &s, true, true, 1);
        for (n, r) in next.iter_mut().zip(&self.r0) {
            for (a, b) in n.iter_mut().zip(r) {
                *a += b;
            }
        }
        next
    }

    fn norms(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
        let g = &self.grid;
        let mut l1: f64 = 0.0;
        let mut sup: f64 = 0.0;
        for (u, v) in a.iter().zip(b) {
            let mut acc = 0.0;
            for im in 0..g.n_m() {
                let Some(end) = g.row_end(im) else { continue };
                for ix in 0..=end {
                    let k = g.idx(im, ix, 0);
                    let d = (u[k] - v[k]).abs();
                    sup = sup.max(d);
                    acc += g.area_weight(im, ix) * d;
                }
            }
            l1 = l1.max(acc);
        }
        (l1, sup)
    }

    fn iterate_from(&self, correction: Vec<Vec<f64>>, n: usize, inc: (f64, f64)) -> VolterraIterate {
        let mut values = self.seed.values.clone();
        for (v, c) in values.iter_mut().zip(&correction) {
            for (a, b) in v.iter_mut().zip(c) {
                *a += b;
            }
        }
        let provenance = if self.model.drift_kind == DriftKind::Zero { self.seed.provenance } else { Provenance::Parametrix };
        let mut density = JointDensityGrid { grid: self.grid.clone(), values, trace: Vec::new(), provenance };
        density.trace_from_diagonal();
        VolterraIterate { density, correction, n, increment_l1: inc.0, increment_sup: inc.1 }
    }

    /// Picard iteration from `p⁽⁰⁾ = p₀`.
    pub fn solve(&self) -> Result<(VolterraIterate, ConvergenceReport)> {
        let g = &self.grid;
        let k = g.n_slices();
        let horizon = *g.times.last().expect("validated grid");
        let escape_bound = reflection_escape(g.m_box, self.model.initial.mean()[0], horizon, self.model.drift_bound);
        let mut d = vec![vec![0.0; g.slice_len()]; k];
        let mut inc_l1 = Vec::new();
        let mut inc_sup = Vec::new();
        let mut converged = false;
        if self.model.drift_kind == DriftKind::Zero {
            converged = true;
        } else {
            let mut rising = 0;
            for _ in 0..self.settings.max_iter {
                let next = self.step(&d);
                let (l1, sup) = self.norms(&next, &d);
                d = next;
                if let Some(prev) = inc_l1.last() {
                    if l1 >= *prev {
                        rising += 1;
                    } else {
                        rising = 0;
                    }
                }
                inc_l1.push(l1);
                inc_sup.push(sup);
                if !l1.is_finite() || rising >= 3 {
                    bail!(
                        Divergence,
                        "Picard increments stopped decreasing: L¹ increments {:?}",
                        inc_l1
                    );
                }
                if l1 < self.settings.tol {
                    converged = true;
                    break;
                }
            }
        }
        let n = inc_l1.len();
        let last = (inc_l1.last().copied().unwrap_or(0.0), inc_sup.last().copied().unwrap_or(0.0));
        let it = self.iterate_from(d, n, last);
        let report = self.report(&it, inc_l1, inc_sup, converged, escape_bound)?;
        Ok((it, report))
    }

    fn report(
        &self,
        it: &VolterraIterate,
        inc_l1: Vec<f64>,
        inc_sup: Vec<f64>,
        converged: bool,
        escape_bound: f64,
    ) -> Result<ConvergenceReport> {
        let g = &self.grid;
        let horizon = *g.times.last().expect("validated grid");
        let observed: Vec<f64> = inc_l1.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
        // r_n = (C/2) T^{α/2} Γ(α/2) Γ(nα/2)/Γ((n+1)α/2): the shape α is fitted
        // by least squares on log ratios, C as the smallest dominating constant
        let unit = |n: usize, alpha: f64| -> f64 {
            let nf = n as f64;
            (0.5 * alpha * horizon.ln() + libm::lgamma(alpha / 2.0) + libm::lgamma(nf * alpha / 2.0)
                - libm::lgamma((nf + 1.0) * alpha / 2.0))
            .exp()
                / 2.0
        };
        let usable: Vec<(usize, f64)> =
            observed.iter().enumerate().filter(|(_, r)| **r > 0.0 && r.is_finite()).map(|(i, r)| (i + 1, *r)).collect();
        let spread = |alpha: f64| -> f64 {
            let logs: Vec<f64> = usable.iter().map(|(n, r)| (r / unit(*n, alpha)).ln()).collect();
            let mean = logs.iter().sum::<f64>() / logs.len().max(1) as f64;
            logs.iter().map(|v| (v - mean) * (v - mean)).sum()
        };
        let alpha = if usable.len() >= 3 {
            (0..=180).map(|i| 0.2 + 0.01 * i as f64).min_by(|a, b| spread(*a).total_cmp(&spread(*b))).unwrap_or(self.settings.alpha)
        } else {
            self.settings.alpha
        };
        let c_t = usable.iter().map(|(n, r)| r / unit(*n, alpha)).fold(0.0, f64::max);
        let c_fit = if c_t > 0.0 { c_t } else { 1.0 };
        let bound: Vec<f64> = (1..=inc_l1.len().max(1) as u32)
            .map(|n| contraction_bound_log(n, alpha, c_fit, g.m_box, horizon, 1).map(|v| v.exp()))
            .collect::<Result<_>>()?;
        let bound_ratios: Vec<f64> = (1..=observed.len()).map(|n| c_fit * unit(n, alpha)).collect();
        let dominated_from = (0..=observed.len())
            .find(|&i| observed[i..].iter().zip(&bound_ratios[i..]).all(|(o, b)| *o <= b * (1.0 + 1e-12)));
        let mass: Vec<f64> = (0..g.n_slices()).map(|s| it.density.mass(s)).collect();
        let min_value = it.density.values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let min_relative_resolved = it.density.values[(self.cut.max(1) - 1).min(g.n_slices() - 1)..]
            .iter()
            .map(|v| {
                let top = v.iter().cloned().fold(0.0, f64::max);
                let low = v.iter().cloned().fold(0.0, f64::min);
                if top > 0.0 { low / top } else { 0.0 }
            })
            .fold(0.0, f64::min);
        Ok(ConvergenceReport {
            iterations: inc_l1.len(),
            converged,
            increments_l1: inc_l1,
            increments_sup: inc_sup,
            observed_ratios: observed,
            bound,
            bound_ratios,
            fitted_c_t: c_t,
            alpha,
            dominated_from,
            mass,
            min_value,
            min_relative_resolved,
            escape_bound,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let n = a.len().min(b.len());
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for i in 4 * chunks..n {
        s0 += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3)
}

/// `∫_{a≤b<m} p₀(b, a; t) db`.
pub fn seed_sub_mass(model: &ModelSpec, m: f64, a: f64, t: f64) -> f64 {
    if a > m {
        return 0.0;
    }
    match &model.initial.law {
        Initial::Known(InitialSpec::Gaussian { mean, width }) => {
            let (mu, w2) = (mean[0], width * width);
            let var = t + w2;
            let v = t * w2 / var;
            let part = |c: f64| {
                let cs = (mu * t + c * w2) / var;
                let frac = if v > 0.0 { norm_cdf((m - cs) / v.sqrt()) } else if m >= mu { 1.0 } else { 0.0 };
                gauss1(c - mu, var) * frac
            };
            part(a) - part(2.0 * m - a)
        }
        _ => model
            .initial
            .truncated_atoms(32, m)
            .iter()
            .map(|at| at.w * (gauss1(a - at.x[0], t) - gauss1(a - (2.0 * m - at.x[0]), t)))
            .sum(),
    }
}

/// Start points and weights used by the closed-form seed integrals at row `m`.
fn seed_atoms(model: &ModelSpec, m: f64, h: f64) -> Vec<(f64, f64)> {
    match &model.initial.law {
        Initial::Known(InitialSpec::Gaussian { mean, width }) if *width <= 0.05 * h => {
            let mu = mean[0];
            let w = norm_cdf((m - mu) / width);
            if w <= 0.0 {
                Vec::new()
            } else {
                vec![(mu.min(m), w)]
            }
        }
        _ => model.initial.truncated_atoms(12, m).iter().filter(|a| a.w != 0.0).map(|a| (a.x[0], a.w)).collect(),
    }
}

/// `∫_{-∞}^{upper} B(a)·poly(a)·φ(a-c1; v1)·φ(a-c2; v2) da`.
fn gauss_pair<P: Fn(f64) -> f64>(model: &ModelSpec, c1: f64, v1: f64, c2: f64, v2: f64, upper: f64, poly: P, rule: &Rule) -> f64 {
    let v = v1 + v2;
    let e = (c1 - c2) * (c1 - c2) / (2.0 * v);
    if e > 45.0 {
        return 0.0;
    }
    let pref = (-e).exp() / (2.0 * core::f64::consts::PI * v).sqrt();
    let cs = (c1 * v2 + c2 * v1) / v;
    let vs = v1 * v2 / v;
    let sd = vs.sqrt();
    let lo = cs - 9.0 * sd;
    let hi = upper.min(cs + 9.0 * sd);
    if hi <= lo {
        return 0.0;
    }
    pref * rule.integrate(lo, hi, |a| model.drift.eval1(a) * poly(a) * gauss1(a - cs, vs))
}

/// Integrand of `R₀` in `s` for a point start `x0`: the α and β parts at
/// `(m, x)` with `τ = t - s`, closed form in `a` up to the drift factor.
fn seed_integrand(model: &ModelSpec, m: f64, x: f64, s: f64, tau: f64, x0: f64, rule: &Rule) -> f64 {
    if m < x0 || tau <= 0.0 || s <= 0.0 {
        return 0.0;
    }
    let c0 = 2.0 * m - x0;
    let c2 = 2.0 * m - x;
    let t2 = tau * tau;
    // α: B(a)[φ(a-x0; s) - φ(a-c0; s)]·2φ''(a-c2; τ)
    let phi2 = |a: f64| 2.0 * ((a - c2) * (a - c2) - tau) / t2;
    let alpha = gauss_pair(model, x0, s, c2, tau, m, phi2, rule) - gauss_pair(model, c0, s, c2, tau, m, phi2, rule);
    // β: B(a)(2(c0-a)/s)φ(a-c0; s)[φ'(a-x; τ) - φ'(a-c2; τ)]
    let beta = gauss_pair(model, c0, s, x, tau, m, |a| 2.0 * (c0 - a) / s * (-(a - x) / tau), rule)
        - gauss_pair(model, c0, s, c2, tau, m, |a| 2.0 * (c0 - a) / s * (-(a - c2) / tau), rule);
    alpha + beta
}

/// Convenience wrapper: builds the operator and runs the Picard iteration.
pub fn solve(model: &ModelSpec, grid: Arc<TriangularGrid>, max_iter: usize, tol: f64) -> Result<(JointDensityGrid, ConvergenceReport)> {
    let settings = SolverSettings { max_iter, tol, ..SolverSettings::default() };
    let op = Parametrix::new(model, grid, settings)?;
    let (it, rep) = op.solve()?;
    Ok((it.density, rep))
}

/// `∫_𝒯 |p - q|` on the last slice.
pub fn l1_distance(p: &JointDensityGrid, q: &JointDensityGrid, slice: usize) -> Result<f64> {
    let d = p.combine(1.0, q, -1.0)?;
    let g = &d.grid;
    let mut acc = 0.0;
    for im in 0..g.n_m() {
        let Some(end) = g.row_end(im) else { continue };
        for ix in 0..=end {
            for e in 0..g.n_extra() {
                acc += g.area_weight(im, ix) * g.extra_weight(e) * d.values[slice][g.idx(im, ix, e)].abs();
            }
        }
    }
    Ok(acc)
}

/// Seed factor used by tests and diagnostics: `p₀` for a Gaussian start.
pub fn seed_value(model: &ModelSpec, m: f64, x: f64, t: f64) -> f64 {
    match &model.initial.law {
        Initial::Known(InitialSpec::Gaussian { mean, width }) => gaussian_start_factor(m, x, t, 0.0, mean[0], *width),
        _ => model
            .initial
            .truncated_atoms(32, m)
            .iter()
            .map(|a| a.w * crate::brownian::bm_joint_density_unchecked(m, &[x], t, &a.x[..1]))
            .sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::exact_density;
    use crate::model::{build_model, Drift, DriftSpec};
    use crate::quad::integrate_adaptive;
    use approx::assert_abs_diff_eq;

    fn model(drift: DriftSpec) -> ModelSpec {
        build_model(Drift::Known(drift), Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 1e-3 }), 1).unwrap()
    }

    #[test]
    fn hat_moments_match_quadrature() {
        let h = 0.1;
        for tau in [1e-4, 0.01, 0.5] {
            let o_min = -6;
            let len = 13;
            let mut mom = vec![[0.0; 4]; len];
            kernel_moments(tau, h, o_min, len, &mut mom);
            for (q, w) in mom.iter().enumerate() {
                let o = (o_min + q as i64) as f64;
                let hat = |z: f64| (1.0 - (z / h - o).abs()).max(0.0);
                let d1 = |z: f64| -z / tau * gauss1(z, tau);
                let d2 = |z: f64| (z * z - tau) / (tau * tau) * gauss1(z, tau);
                let a = (o - 1.0) * h;
                let b = (o + 1.0) * h;
                let full1 = integrate_adaptive(|z| hat(z) * d1(z), a, b, 1e-13, 1e-12).unwrap().0;
                let left1 = integrate_adaptive(|z| hat(z) * d1(z), a, o * h, 1e-13, 1e-12).unwrap().0;
                let full2 = integrate_adaptive(|z| hat(z) * d2(z), a, b, 1e-11, 1e-12).unwrap().0;
                let scale = 1.0 / tau;
                assert_abs_diff_eq!(w[0], full1, epsilon = 1e-9 * scale);
                assert_abs_diff_eq!(w[1], left1, epsilon = 1e-9 * scale);
                assert_abs_diff_eq!(w[2], 2.0 * full2, epsilon = 1e-8 * scale * scale);
            }
        }
    }

    #[test]
    fn killed_kernel_is_start_derivative_of_integrated_reflection_kernel() {
        // d/da ∫_{max(a,x)}^{m} g(2b - x - a; τ) db = φ'(a - x; τ) - φ'(a - c2; τ)
        let (m, x, tau) = (0.8, 0.1, 0.3);
        let integral = |a: f64| {
            integrate_adaptive(|b| crate::brownian::reflection_kernel(2.0 * b - x - a, tau), a.max(x), m, 1e-14, 1e-13).unwrap().0
        };
        let dphi = |u: f64| -u / tau * gauss1(u, tau);
        for a in [-0.4, 0.05, 0.3, 0.7] {
            let h = 1e-4;
            let fd = (integral(a + h) - integral(a - h)) / (2.0 * h);
            let exact = dphi(a - x) - dphi(a - (2.0 * m - x));
            assert_abs_diff_eq!(fd, exact, epsilon = 1e-6);
        }
    }

    #[test]
    fn seed_sub_mass_matches_quadrature() {
        let wide = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.1], width: 0.3 }),
            1,
        )
        .unwrap();
        for (m, a, t) in [(0.5, -0.2, 0.4), (0.2, 0.1, 1.0), (1.5, -1.0, 0.2)] {
            let q = integrate_adaptive(|b| seed_value(&wide, b, a, t), a, m, 1e-14, 1e-12).unwrap().0;
            assert_abs_diff_eq!(seed_sub_mass(&wide, m, a, t), q, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_drift_returns_seed() {
        let m = model(DriftSpec::Zero);
        let grid = grid_for(&m, 48, 8, 1.0).unwrap();
        let (p, rep) = solve(&m, grid.clone(), 10, 1e-9).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 0);
        assert_eq!(p.values, p0_seed(&m, grid).unwrap().values);
        assert_eq!(p.provenance, Provenance::Exact);
    }

    #[test]
    fn rejects_unresolved_grid_and_higher_dimension() {
        let m = model(DriftSpec::Constant { mu: vec![0.5] });
        let coarse = grid_for(&m, 9, 4, 1.0).unwrap();
        assert!(matches!(Parametrix::new(&m, coarse, SolverSettings::default()), Err(crate::Error::Resolution(_))));
        let m2 = build_model(
            Drift::Known(DriftSpec::Zero),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0, 0.0], width: 1e-3 }),
            2,
        )
        .unwrap();
        assert!(matches!(grid_for(&m2, 32, 4, 1.0), Err(crate::Error::Unsupported(_))));
    }

    #[test]
    fn first_increment_tracks_girsanov_difference() {
        let m = model(DriftSpec::Constant { mu: vec![0.1] });
        let grid = grid_for(&m, 64, 8, 0.25).unwrap();
        let op = Parametrix::new(&m, grid.clone(), SolverSettings::default()).unwrap();
        let r0 = op.seed_increment();
        let exact = exact_density(&m, grid.clone()).unwrap();
        let diff = exact.combine(1.0, op.seed(), -1.0).unwrap();
        let last = grid.n_slices() - 1;
        let err = l1_distance(&r0, &diff, last).unwrap();
        let size = l1_distance(&diff, &diff.combine(0.0, &diff, 0.0).unwrap(), last).unwrap();
        // second order in μ remains
        assert!(err < 0.15 * size, "{err} vs {size}");
    }

    #[test]
    fn constant_drift_converges_to_girsanov() {
        let m = model(DriftSpec::Constant { mu: vec![0.5] });
        let grid = grid_for(&m, 64, 16, 1.0).unwrap();
        let (p, rep) = solve(&m, grid.clone(), 30, 1e-8).unwrap();
        assert!(rep.converged, "{rep:?}");
        let exact = exact_density(&m, grid.clone()).unwrap();
        let err = l1_distance(&p, &exact, grid.n_slices() - 1).unwrap();
        assert!(err < 0.03, "{err}");
        assert_abs_diff_eq!(*rep.mass.last().unwrap(), 1.0, epsilon = 0.02);
    }

    fn tanh_model() -> ModelSpec {
        model(DriftSpec::Tanh { amplitude: 1.0, scale: 1.0 })
    }

    #[test]
    fn doubling_time_nodes_barely_moves_the_increment() {
        let m = tanh_model();
        let grid = grid_for(&m, 64, 8, 1.0).unwrap();
        let base = Parametrix::new(&m, grid.clone(), SolverSettings::default()).unwrap().seed_increment();
        let fine_settings = SolverSettings { panel_nodes: 12, last_panel_nodes: 24, seed_nodes: 40, ..SolverSettings::default() };
        let fine = Parametrix::new(&m, grid.clone(), fine_settings).unwrap().seed_increment();
        let last = grid.n_slices() - 1;
        let size = l1_distance(&fine, &fine.combine(0.0, &fine, 0.0).unwrap(), last).unwrap();
        let change = l1_distance(&base, &fine, last).unwrap();
        assert!(change < 1e-4 * size, "{change} vs {size}");
    }

    #[test]
    fn converged_output_is_a_fixed_point_and_dominated() {
        let m = tanh_model();
        let grid = grid_for(&m, 64, 12, 1.0).unwrap();
        let settings = SolverSettings { tol: 1e-9, ..SolverSettings::default() };
        let op = Parametrix::new(&m, grid.clone(), settings).unwrap();
        let (it, rep) = op.solve().unwrap();
        assert!(rep.converged);
        let again = op.step(&it.correction);
        let (l1, _) = op.norms(&again, &it.correction);
        assert!(l1 < 2.0 * settings.tol, "{l1}");
        // geometric decay at least
        assert!(rep.observed_ratios.iter().skip(1).all(|r| *r < 0.9), "{:?}", rep.observed_ratios);
        assert!(rep.dominated_from.is_some());
        for mass in &rep.mass[grid.n_slices() / 2..] {
            assert_abs_diff_eq!(*mass, 1.0, epsilon = 0.02);
        }
        let c = crate::brownian::fit_gaussian_domination(&it.density, &[0.0], 1e-6);
        assert!(c.is_finite() && c > 0.0 && c < 50.0, "{c}");
    }

    #[test]
    fn alpha_and_beta_masses_balance() {
        let m = tanh_model();
        let grid = grid_for(&m, 64, 12, 1.0).unwrap();
        let op = Parametrix::new(&m, grid.clone(), SolverSettings::default()).unwrap();
        let exact_bm = exact_density(&model(DriftSpec::Zero), grid.clone()).unwrap();
        let a = op.apply_alpha_term(&exact_bm).unwrap();
        let b = op.apply_beta_term(&exact_bm).unwrap();
        let s = grid.n_slices() - 1;
        let (ma, mb) = (a.mass(s), b.mass(s));
        assert!(ma.abs() > 1e-2, "{ma}");
        assert!((ma + mb).abs() < 0.02 * ma.abs(), "{ma} {mb}");
    }

    #[test]
    fn tanh_density_matches_monte_carlo_histogram() {
        use crate::mc::{cell_histogram, grid_cell_masses, l1_cell_distance, simulate, CellSpec};
        let m = tanh_model();
        let grid = grid_for(&m, 97, 24, 1.0).unwrap();
        let (p, rep) = solve(&m, grid.clone(), 40, 1e-8).unwrap();
        assert!(rep.converged);
        let batch = simulate(&m, 1.0, 100, 1_000_000, true, 11).unwrap();
        // cells start clear of the jump in m at the start point, which cell
        // interpolation of nodal values cannot resolve
        let spec = CellSpec { m_lo: 0.25, m_hi: 3.25, nm: 12, x_lo: -3.0, x_hi: 3.0, nx: 12 };
        let h = cell_histogram(&batch, batch.last(), &spec);
        let q = grid_cell_masses(&p, grid.n_slices() - 1, &spec, 8).unwrap();
        let dist = l1_cell_distance(&h, &q);
        assert!(dist < 0.03, "{dist}");
    }
}

//! Monte Carlo simulation of `(M_t, X_t)` with Brownian-bridge corrected
//! suprema, density estimators, and the Feynman–Kac functional of the dual
//! semigroup.
//!
//! Path `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so a batch
//! is bit-identical for any worker count and any chunking.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Standard, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::model::{JointDensityGrid, ModelSpec, Provenance, TriangularGrid};
use crate::MAX_DIM;

/// Largest tolerated fraction of paths dropped for non-finite states.
pub const MAX_EXCLUSION_RATE: f64 = 1e-3;

const CHUNK: usize = 2048;

/// How per-path random streams are derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamDescriptor {
    pub seed: u64,
    pub scheme: String,
}

impl StreamDescriptor {
    pub fn new(seed: u64) -> Self {
        StreamDescriptor { seed, scheme: "chacha8:seed_from_u64(seed),stream=path_index".into() }
    }
}

/// Full simulation request.
#[derive(Debug, Clone, PartialEq)]
pub struct PathConfig {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub bridge: bool,
    pub seed: u64,
    /// Times at which `(M, X)` is recorded; empty means the horizon only.
    pub snapshots: Vec<f64>,
    /// Fixed start instead of sampling the initial law.
    pub start: Option<[f64; MAX_DIM]>,
    /// Simulate `dY = -B(Y)dt + dW` (the dual dynamics).
    pub reverse_drift: bool,
    /// Accumulate `exp(-∫ div B(Y_u) du)` by the trapezoid rule.
    pub weights: bool,
}

impl PathConfig {
    pub fn new(horizon: f64, n_steps: usize, n_paths: usize, bridge: bool, seed: u64) -> Self {
        PathConfig {
            horizon,
            n_steps,
            n_paths,
            bridge,
            seed,
            snapshots: Vec::new(),
            start: None,
            reverse_drift: false,
            weights: false,
        }
    }
}

/// Simulated paths recorded at one or more snapshot times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBatch {
    pub d: usize,
    /// Number of retained paths.
    pub n_paths: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub horizon: f64,
    pub bridge: bool,
    pub stream: StreamDescriptor,
    pub times: Vec<f64>,
    /// Per snapshot: states, path-major (`n_paths · d`).
    pub states: Vec<Vec<f64>>,
    /// Per snapshot: running suprema of the first coordinate.
    pub sups: Vec<Vec<f64>>,
    /// First coordinate of each start.
    pub starts: Vec<f64>,
    pub weights: Option<Vec<Vec<f64>>>,
    /// Paths dropped because a state, supremum or weight became non-finite.
    pub excluded: usize,
}

impl PathBatch {
    pub fn snapshot_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
    }

    /// Terminal snapshot index.
    pub fn last(&self) -> usize {
        self.times.len() - 1
    }

    pub fn state(&self, snap: usize, path: usize) -> &[f64] {
        &self.states[snap][path * self.d..(path + 1) * self.d]
    }

    /// Checks `M ≥ X¹`, `M ≥ X₀¹` and positive weights.
    pub fn check_invariants(&self) -> Result<()> {
        for s in 0..self.times.len() {
            for i in 0..self.n_paths {
                let m = self.sups[s][i];
                if m < self.states[s][i * self.d] || m < self.starts[i] {
                    bail!(Validation, "path {i} has supremum {m} below its state or start");
                }
                if let Some(w) = &self.weights {
                    if !(w[s][i] > 0.0) {
                        bail!(Validation, "path {i} has nonpositive weight");
                    }
                }
            }
        }
        Ok(())
    }
}

/// Inverse-CDF sample of the maximum of a Brownian bridge from `a` to `b`
/// over a step of length `dt`, with `u ∈ (0, 1]`.
#[inline]
pub fn bridge_max(a: f64, b: f64, dt: f64, u: f64) -> f64 {
    let dx = b - a;
    0.5 * (a + b + (dx * dx - 2.0 * dt * u.ln()).sqrt())
}

/// Analytic CDF of that bridge maximum.
pub fn bridge_max_cdf(y: f64, a: f64, b: f64, dt: f64) -> f64 {
    if y < a.max(b) {
        return 0.0;
    }
    1.0 - (-2.0 * (y - a) * (y - b) / dt).exp()
}

#[inline]
fn uniform_open0(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = Standard.sample(rng);
    1.0 - u
}

pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

struct ChunkOut {
    states: Vec<Vec<f64>>,
    sups: Vec<Vec<f64>>,
    starts: Vec<f64>,
    weights: Vec<Vec<f64>>,
    excluded: usize,
}

fn snapshot_steps(cfg: &PathConfig, dt: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let times = if cfg.snapshots.is_empty() { vec![cfg.horizon] } else { cfg.snapshots.clone() };
    let mut steps = Vec::with_capacity(times.len());
    for (i, t) in times.iter().enumerate() {
        let k = (t / dt).round();
        if !(k >= 1.0) || (k * dt - t).abs() > 1e-9 * t.max(1.0) || k as usize > cfg.n_steps {
            bail!(Config, "snapshot time {t} is not a step boundary of dt = {dt}");
        }
        if i > 0 && k as usize <= steps[i - 1] {
            bail!(Config, "snapshot times must be increasing");
        }
        steps.push(k as usize);
    }
    Ok((times, steps))
}

/// Runs the Euler scheme with optional bridge-corrected suprema.
pub fn simulate_with(model: &ModelSpec, cfg: &PathConfig) -> Result<PathBatch> {
    if cfg.n_steps == 0 || cfg.n_paths == 0 {
        bail!(Config, "n_steps and n_paths must be at least 1");
    }
    if !(cfg.horizon > 0.0) || !cfg.horizon.is_finite() {
        bail!(Config, "horizon must be positive, got {}", cfg.horizon);
    }
    let d = model.d;
    let dt = cfg.horizon / cfg.n_steps as f64;
    let sdt = dt.sqrt();
    let (times, snap_steps) = snapshot_steps(cfg, dt)?;
    let last_step = *snap_steps.last().expect("nonempty");
    let ns = times.len();
    let sign = if cfg.reverse_drift { -1.0 } else { 1.0 };
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);

    let chunks = crate::parallel::map_indexed(n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(cfg.n_paths);
        let mut out = ChunkOut {
            states: vec![Vec::with_capacity((hi - lo) * d); ns],
            sups: vec![Vec::with_capacity(hi - lo); ns],
            starts: Vec::with_capacity(hi - lo),
            weights: vec![Vec::new(); ns],
            excluded: 0,
        };
        let mut x = [0.0; MAX_DIM];
        let mut xn = [0.0; MAX_DIM];
        let mut b = [0.0; MAX_DIM];
        let mut rec_x = vec![0.0; ns * d];
        let mut rec_m = vec![0.0; ns];
        let mut rec_w = vec![0.0; ns];
        for path in lo..hi {
            let mut rng = path_rng(cfg.seed, path as u64);
            match &cfg.start {
                Some(s) => x[..d].copy_from_slice(&s[..d]),
                None => model.initial.sample(&mut rng, &mut x[..d]),
            }
            let start1 = x[0];
            let mut sup = x[0];
            let mut log_w = 0.0;
            let mut div_prev = if cfg.weights { model.drift.divergence(&x[..d]) } else { 0.0 };
            let mut next_snap = 0;
            for step in 1..=last_step {
                model.drift.eval(&x[..d], &mut b[..d]);
                for k in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    xn[k] = x[k] + sign * b[k] * dt + sdt * z;
                }
                let top = if cfg.bridge {
                    bridge_max(x[0], xn[0], dt, uniform_open0(&mut rng))
                } else {
                    xn[0]
                };
                if top > sup {
                    sup = top;
                }
                if cfg.weights {
                    let div_next = model.drift.divergence(&xn[..d]);
                    log_w -= 0.5 * dt * (div_prev + div_next);
                    div_prev = div_next;
                }
                x[..d].copy_from_slice(&xn[..d]);
                if step == snap_steps[next_snap] {
                    rec_x[next_snap * d..(next_snap + 1) * d].copy_from_slice(&x[..d]);
                    rec_m[next_snap] = sup;
                    rec_w[next_snap] = log_w.exp();
                    next_snap += 1;
                }
            }
            let finite = rec_x.iter().all(|v| v.is_finite())
                && rec_m.iter().all(|v| v.is_finite())
                && (!cfg.weights || rec_w.iter().all(|v| v.is_finite() && *v > 0.0));
            if !finite {
                out.excluded += 1;
                continue;
            }
            out.starts.push(start1);
            for s in 0..ns {
                out.states[s].extend_from_slice(&rec_x[s * d..(s + 1) * d]);
                out.sups[s].push(rec_m[s]);
                if cfg.weights {
                    out.weights[s].push(rec_w[s]);
                }
            }
        }
        out
    });

    let mut batch = PathBatch {
        d,
        n_paths: 0,
        n_steps: cfg.n_steps,
        dt,
        horizon: cfg.horizon,
        bridge: cfg.bridge,
        stream: StreamDescriptor::new(cfg.seed),
        times,
        states: vec![Vec::with_capacity(cfg.n_paths * d); ns],
        sups: vec![Vec::with_capacity(cfg.n_paths); ns],
        starts: Vec::with_capacity(cfg.n_paths),
        weights: if cfg.weights { Some(vec![Vec::with_capacity(cfg.n_paths); ns]) } else { None },
        excluded: 0,
    };
    for c in chunks {
        batch.excluded += c.excluded;
        batch.starts.extend_from_slice(&c.starts);
        for s in 0..ns {
            batch.states[s].extend_from_slice(&c.states[s]);
            batch.sups[s].extend_from_slice(&c.sups[s]);
            if let Some(w) = batch.weights.as_mut() {
                w[s].extend_from_slice(&c.weights[s]);
            }
        }
    }
    batch.n_paths = batch.starts.len();
    if batch.excluded as f64 > MAX_EXCLUSION_RATE * cfg.n_paths as f64 {
        bail!(
            Run,
            "{} of {} paths produced non-finite states (limit {:.1}%)",
            batch.excluded,
            cfg.n_paths,
            100.0 * MAX_EXCLUSION_RATE
        );
    }
    Ok(batch)
}

/// Simulates `(M_T, X_T)` from the model's initial law.
pub fn simulate(model: &ModelSpec, horizon: f64, n_steps: usize, n_paths: usize, bridge: bool, seed: u64) -> Result<PathBatch> {
    simulate_with(model, &PathConfig::new(horizon, n_steps, n_paths, bridge, seed))
}

/// Mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples<I: IntoIterator<Item = f64>>(it: I) -> Self {
        // Welford update keeps the variance accurate for large batches
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in it {
            n += 1;
            let delta = v - mean;
            mean += delta / n as f64;
            m2 += delta * (v - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        McEstimate { mean, std_err: (var / n.max(1) as f64).sqrt(), n }
    }

    /// `|a - b| ≤ k·sqrt(σ_a² + σ_b²)`.
    pub fn agrees_with(&self, other: f64, other_err: f64, k: f64) -> bool {
        (self.mean - other).abs() <= k * (self.std_err * self.std_err + other_err * other_err).sqrt()
    }
}

/// Sample mean of the terminal supremum.
pub fn mean_sup(batch: &PathBatch) -> McEstimate {
    McEstimate::from_samples(batch.sups[batch.last()].iter().copied())
}

/// Density estimator used by [`estimate_density`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMethod {
    /// Counts per node cell `[m ± h/2] × [x ± h/2] ∩ 𝒯`, divided by its area.
    Histogram,
    /// Linear binning onto the triangulation with edges parallel to the
    /// diagonal, divided by each hat function's integral (one dimension only).
    KernelSmoothed,
}

/// A gridded Monte Carlo density with the fraction of paths that fell
/// outside the grid (per slice).
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    pub density: JointDensityGrid,
    pub escaped: Vec<f64>,
}

impl DensityEstimate {
    pub fn coverage_warning(&self, tol: f64) -> Option<String> {
        let worst = self.escaped.iter().cloned().fold(0.0, f64::max);
        (worst > tol).then(|| alloc::format!("{:.3e} of the paths fall outside the grid", worst))
    }
}

/// Estimates the joint density at every grid slice from matching snapshots.
pub fn estimate_density(batch: &PathBatch, grid: Arc<TriangularGrid>, method: DensityMethod) -> Result<DensityEstimate> {
    if batch.n_paths == 0 {
        bail!(Config, "empty path batch");
    }
    if grid.d != batch.d {
        bail!(Config, "grid dimension {} differs from batch dimension {}", grid.d, batch.d);
    }
    let mut snaps = Vec::with_capacity(grid.n_slices());
    for t in &grid.times {
        match batch.snapshot_of(*t) {
            Some(s) => snaps.push(s),
            None => bail!(Config, "batch has no snapshot at grid time {t}"),
        }
    }
    if method == DensityMethod::KernelSmoothed && grid.d != 1 {
        bail!(Unsupported, "kernel-smoothed estimation is implemented for d = 1");
    }
    let mut out = JointDensityGrid::zeros(grid.clone(), Provenance::MonteCarlo);
    let mut escaped = Vec::with_capacity(snaps.len());
    let n = batch.n_paths as f64;
    let hat = if method == DensityMethod::KernelSmoothed { Some(hat_integrals(&grid)) } else { None };
    for (slice, &snap) in snaps.iter().enumerate() {
        let mut counts = vec![0.0; grid.slice_len()];
        let mut lost = 0usize;
        for i in 0..batch.n_paths {
            let m = batch.sups[snap][i];
            let x = batch.state(snap, i);
            let ok = match method {
                DensityMethod::Histogram => deposit_nearest(&grid, m, x, &mut counts),
                DensityMethod::KernelSmoothed => deposit_linear(&grid, m, x[0], &mut counts),
            };
            if !ok {
                lost += 1;
            }
        }
        let vals = &mut out.values[slice];
        match &hat {
            None => {
                let mut vol_extra = 1.0;
                for a in &grid.extra {
                    vol_extra *= a.step;
                }
                for im in 0..grid.n_m() {
                    for ix in 0..grid.n_x() {
                        if !grid.is_active(im, ix) {
                            continue;
                        }
                        let area = if grid.diag_ix(im) == Some(ix) { 0.5 } else { 1.0 } * grid.h * grid.h * vol_extra;
                        for e in 0..grid.n_extra() {
                            let k = grid.idx(im, ix, e);
                            vals[k] = counts[k] / (n * area);
                        }
                    }
                }
            }
            Some(h) => {
                for k in 0..vals.len() {
                    if h[k] > 0.0 {
                        vals[k] = counts[k] / (n * h[k]);
                    }
                }
            }
        }
        escaped.push(lost as f64 / n);
    }
    out.trace_from_diagonal();
    Ok(DensityEstimate { density: out, escaped })
}

fn deposit_nearest(g: &TriangularGrid, m: f64, x: &[f64], counts: &mut [f64]) -> bool {
    let lm = ((m - g.origin) / g.h).round() as i64;
    let lx = ((x[0] - g.origin) / g.h).round() as i64;
    if lm < g.m_lo || lm > g.m_hi || lx < g.x_lo || lx > g.x_hi || lx > lm {
        return false;
    }
    let mut e = 0usize;
    for (k, a) in g.extra.iter().enumerate() {
        let i = ((x[k + 1] - a.lo) / a.step).round();
        if i < 0.0 || i as usize >= a.n {
            return false;
        }
        e = e * a.n + i as usize;
    }
    counts[g.idx((lm - g.m_lo) as usize, (lx - g.x_lo) as usize, e)] += 1.0;
    true
}

/// Corners and barycentric weights of the triangle containing `(m, x)`.
///
/// Squares are split along the direction of the diagonal, so `𝒯` is an exact
/// union of triangles.
pub(crate) fn p1_stencil(g: &TriangularGrid, m: f64, x: f64) -> Option<[(i64, i64, f64); 3]> {
    let um = (m - g.origin) / g.h;
    let ux = (x - g.origin) / g.h;
    let mut i = um.floor() as i64;
    let mut j = ux.floor() as i64;
    // points on the upper box edges belong to the last square
    if i == g.m_hi && um == g.m_hi as f64 {
        i -= 1;
    }
    if j == g.x_hi && ux == g.x_hi as f64 {
        j -= 1;
    }
    if i < g.m_lo || i + 1 > g.m_hi || j < g.x_lo || j + 1 > g.x_hi {
        return None;
    }
    let fm = um - i as f64;
    let fx = ux - j as f64;
    let tri = if fm >= fx {
        [(i, j, 1.0 - fm), (i + 1, j, fm - fx), (i + 1, j + 1, fx)]
    } else {
        [(i, j, 1.0 - fx), (i, j + 1, fx - fm), (i + 1, j + 1, fm)]
    };
    if tri.iter().any(|&(a, b, w)| b > a && w > 0.0) {
        return None;
    }
    Some(tri)
}

fn deposit_linear(g: &TriangularGrid, m: f64, x: f64, counts: &mut [f64]) -> bool {
    if m < x {
        return false;
    }
    let Some(tri) = p1_stencil(g, m, x) else { return false };
    for (a, b, w) in tri {
        if w != 0.0 {
            counts[g.idx((a - g.m_lo) as usize, (b - g.x_lo) as usize, 0)] += w;
        }
    }
    true
}

/// `∫` of each node's hat function over the triangulated part of `𝒯` in the box.
fn hat_integrals(g: &TriangularGrid) -> Vec<f64> {
    let mut out = vec![0.0; g.slice_len()];
    let a = g.h * g.h / 6.0;
    for i in g.m_lo..g.m_hi {
        for j in g.x_lo..g.x_hi {
            // lower triangle: (i,j), (i+1,j), (i+1,j+1)
            let lower = [(i, j), (i + 1, j), (i + 1, j + 1)];
            let upper = [(i, j), (i, j + 1), (i + 1, j + 1)];
            for tri in [lower, upper] {
                if tri.iter().all(|&(p, q)| q <= p) {
                    for (p, q) in tri {
                        out[g.idx((p - g.m_lo) as usize, (q - g.x_lo) as usize, 0)] += a;
                    }
                }
            }
        }
    }
    out
}

/// Rectangular cells `[m_lo, m_hi] × [x_lo, x_hi]` split `nm × nx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub m_lo: f64,
    pub m_hi: f64,
    pub nm: usize,
    pub x_lo: f64,
    pub x_hi: f64,
    pub nx: usize,
}

impl CellSpec {
    pub fn dm(&self) -> f64 {
        (self.m_hi - self.m_lo) / self.nm as f64
    }
    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / self.nx as f64
    }
    pub fn n_cells(&self) -> usize {
        self.nm * self.nx
    }
    /// Edges `(m1, m2, x1, x2)` of cell `k = i·nx + j`.
    pub fn cell(&self, k: usize) -> (f64, f64, f64, f64) {
        let (i, j) = (k / self.nx, k % self.nx);
        let m1 = self.m_lo + i as f64 * self.dm();
        let x1 = self.x_lo + j as f64 * self.dx();
        (m1, m1 + self.dm(), x1, x1 + self.dx())
    }
    pub fn locate(&self, m: f64, x: f64) -> Option<usize> {
        if !(m >= self.m_lo && m < self.m_hi && x >= self.x_lo && x < self.x_hi) {
            return None;
        }
        let i = (((m - self.m_lo) / self.dm()) as usize).min(self.nm - 1);
        let j = (((x - self.x_lo) / self.dx()) as usize).min(self.nx - 1);
        Some(i * self.nx + j)
    }
}

/// Fraction of paths in each cell at snapshot `snap` (first coordinate only).
pub fn cell_histogram(batch: &PathBatch, snap: usize, spec: &CellSpec) -> Vec<f64> {
    cell_histogram_range(batch, snap, spec, 0, batch.n_paths)
}

fn cell_histogram_range(batch: &PathBatch, snap: usize, spec: &CellSpec, lo: usize, hi: usize) -> Vec<f64> {
    let mut h = vec![0.0; spec.n_cells()];
    let n = (hi - lo) as f64;
    for i in lo..hi {
        if let Some(k) = spec.locate(batch.sups[snap][i], batch.states[snap][i * batch.d]) {
            h[k] += 1.0 / n;
        }
    }
    h
}

/// `Σ |a - b|` over cells.
pub fn l1_cell_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum()
}

/// Mean over cells of the standard error of cell masses, estimated from
/// `groups` disjoint path subsets.
pub fn cell_standard_error(batch: &PathBatch, snap: usize, spec: &CellSpec, groups: usize) -> Result<f64> {
    if groups < 2 || batch.n_paths < 2 * groups {
        bail!(LowStatistics, "need at least two groups with paths in each");
    }
    let size = batch.n_paths / groups;
    let hs: Vec<Vec<f64>> = (0..groups).map(|g| cell_histogram_range(batch, snap, spec, g * size, (g + 1) * size)).collect();
    let mut total = 0.0;
    for k in 0..spec.n_cells() {
        let mean = hs.iter().map(|h| h[k]).sum::<f64>() / groups as f64;
        let var = hs.iter().map(|h| (h[k] - mean).powi(2)).sum::<f64>() / (groups - 1) as f64;
        // standard error of the full-batch mass from the spread of group masses
        total += (var / groups as f64).sqrt();
    }
    Ok(total / spec.n_cells() as f64)
}

/// Cell masses of a gridded one-dimensional density by `sub × sub` midpoint
/// sampling of its piecewise-linear interpolant.
pub fn grid_cell_masses(p: &JointDensityGrid, slice: usize, spec: &CellSpec, sub: usize) -> Result<Vec<f64>> {
    if p.grid.d != 1 {
        bail!(Unsupported, "cell masses from a grid are implemented for d = 1");
    }
    let sub = sub.max(1);
    let masses = crate::parallel::map_indexed(spec.n_cells(), |k| {
        let (m1, _, x1, _) = spec.cell(k);
        let hm = spec.dm() / sub as f64;
        let hx = spec.dx() / sub as f64;
        let mut acc = 0.0;
        for a in 0..sub {
            let m = m1 + (a as f64 + 0.5) * hm;
            for b in 0..sub {
                let x = x1 + (b as f64 + 0.5) * hx;
                acc += p.interp1(slice, m, x);
            }
        }
        acc * hm * hx
    });
    Ok(masses)
}

/// Monte Carlo estimate of `Q_t(f)(x) = E[f(Y_t^x) exp(-∫₀ᵗ div B(Y_u) du)]`
/// with `dY = -B(Y)dt + dW`, `Y₀ = x`.
pub fn feynman_kac<F: Fn(&[f64]) -> f64 + Sync>(
    model: &ModelSpec,
    f: F,
    x: &[f64],
    t: f64,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<McEstimate> {
    let batch = dual_paths(model, x, t, n_steps, n_paths, seed)?;
    let w = batch.weights.as_ref().expect("weights requested");
    let s = batch.last();
    Ok(McEstimate::from_samples((0..batch.n_paths).map(|i| f(batch.state(s, i)) * w[s][i])))
}

/// Weighted paths of the dual dynamics started at `x`.
pub fn dual_paths(model: &ModelSpec, x: &[f64], t: f64, n_steps: usize, n_paths: usize, seed: u64) -> Result<PathBatch> {
    if x.len() != model.d {
        bail!(Config, "start has {} coordinates for dimension {}", x.len(), model.d);
    }
    let mut start = [0.0; MAX_DIM];
    start[..model.d].copy_from_slice(x);
    let cfg = PathConfig {
        start: Some(start),
        reverse_drift: true,
        weights: true,
        ..PathConfig::new(t, n_steps, n_paths, false, seed)
    };
    simulate_with(model, &cfg)
}

/// Kolmogorov–Smirnov distance between `n` one-step bridge-maximum samples
/// and the analytic bridge-maximum CDF.
pub fn bridge_ks_distance(a: f64, b: f64, dt: f64, n: usize, seed: u64) -> f64 {
    let mut rng = path_rng(seed, 0);
    let mut xs: Vec<f64> = (0..n).map(|_| bridge_max(a, b, dt, uniform_open0(&mut rng))).collect();
    xs.sort_by(f64::total_cmp);
    let mut dist: f64 = 0.0;
    for (i, y) in xs.iter().enumerate() {
        let f = bridge_max_cdf(*y, a, b, dt);
        dist = dist.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
    }
    dist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::drifted_bm_cell_mass;
    use crate::model::{build_model, Drift, DriftSpec, Initial, InitialSpec};
    use approx::assert_abs_diff_eq;

    fn bm_model() -> ModelSpec {
        build_model(Drift::Known(DriftSpec::Zero), Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 1e-9 }), 1)
            .unwrap()
    }

    #[test]
    fn bridge_reference_sample() {
        assert_abs_diff_eq!(bridge_max(0.0, 0.0, 1.0, (-2.0f64).exp()), 1.0, epsilon = 1e-15);
        assert_eq!(bridge_max(0.3, -0.2, 0.1, 1.0), 0.3);
    }

    #[test]
    fn bridge_law_passes_ks() {
        let n = 20_000;
        let d = bridge_ks_distance(0.1, -0.4, 0.25, n, 7);
        assert!(d <= 1.63 / (n as f64).sqrt(), "{d}");
    }

    #[test]
    fn batch_is_reproducible_and_valid() {
        let m = bm_model();
        let a = simulate(&m, 1.0, 50, 5000, true, 11).unwrap();
        let b = simulate(&m, 1.0, 50, 5000, true, 11).unwrap();
        assert_eq!(a, b);
        a.check_invariants().unwrap();
        let c = simulate(&m, 1.0, 50, 5000, true, 12).unwrap();
        assert_ne!(a.sups, c.sups);
    }

    #[test]
    fn prefix_of_larger_batch_matches() {
        let m = bm_model();
        let a = simulate(&m, 1.0, 20, 3000, true, 5).unwrap();
        let b = simulate(&m, 1.0, 20, 7000, true, 5).unwrap();
        assert_eq!(a.sups[0][..], b.sups[0][..3000]);
    }

    #[test]
    fn sup_mean_close_to_reflection_value() {
        let m = bm_model();
        let batch = simulate(&m, 1.0, 200, 40_000, true, 3).unwrap();
        let e = mean_sup(&batch);
        assert!(e.agrees_with((2.0 / core::f64::consts::PI).sqrt(), 0.0, 4.0), "{e:?}");
    }

    #[test]
    fn snapshots_record_intermediate_times() {
        let m = bm_model();
        let cfg = PathConfig { snapshots: vec![0.25, 1.0], ..PathConfig::new(1.0, 64, 2000, true, 9) };
        let b = simulate_with(&m, &cfg).unwrap();
        assert_eq!(b.times, vec![0.25, 1.0]);
        for i in 0..b.n_paths {
            assert!(b.sups[1][i] >= b.sups[0][i]);
        }
        let bad = PathConfig { snapshots: vec![0.3], ..PathConfig::new(1.0, 64, 10, true, 9) };
        assert!(simulate_with(&m, &bad).is_err());
    }

    #[test]
    fn histogram_near_exact_cells() {
        let m = bm_model();
        let batch = simulate(&m, 1.0, 100, 100_000, true, 21).unwrap();
        let spec = CellSpec { m_lo: 0.0, m_hi: 3.0, nm: 16, x_lo: -3.0, x_hi: 3.0, nx: 16 };
        let h = cell_histogram(&batch, 0, &spec);
        let exact: Vec<f64> = (0..spec.n_cells())
            .map(|k| {
                let (m1, m2, x1, x2) = spec.cell(k);
                drifted_bm_cell_mass(m1, m2, x1, x2, 1.0, 0.0, 0.0)
            })
            .collect();
        assert!(l1_cell_distance(&h, &exact) < 0.04);
    }

    #[test]
    fn gridded_estimates_carry_unit_mass() {
        let m = bm_model();
        let batch = simulate(&m, 1.0, 64, 20_000, true, 4).unwrap();
        let grid = Arc::new(TriangularGrid::boxed(1, 6.0, 61, 1, vec![1.0], 1.0).unwrap());
        for method in [DensityMethod::Histogram, DensityMethod::KernelSmoothed] {
            let est = estimate_density(&batch, grid.clone(), method).unwrap();
            assert_eq!(est.density.provenance, Provenance::MonteCarlo);
            assert!(est.coverage_warning(1e-3).is_none());
            assert_abs_diff_eq!(est.density.mass(0), 1.0, epsilon = 0.02);
        }
        let far = grid.n_m() - 1;
        let est = estimate_density(&batch, grid.clone(), DensityMethod::Histogram).unwrap();
        assert_eq!(est.density.at(0, far, 0, 0), 0.0);
    }

    #[test]
    fn hat_integrals_sum_to_area() {
        let g = TriangularGrid::boxed(1, 1.0, 11, 1, vec![1.0], 1.0).unwrap();
        let total: f64 = hat_integrals(&g).iter().sum();
        assert_abs_diff_eq!(total, 0.5 * 4.0, epsilon = 1e-12);
    }

    #[test]
    fn feynman_kac_unit_and_linear_payouts() {
        let m = bm_model();
        let one = feynman_kac(&m, |_| 1.0, &[0.3], 0.5, 10, 1000, 1).unwrap();
        assert_eq!(one.mean, 1.0);
        let c = build_model(
            Drift::Known(DriftSpec::Constant { mu: vec![0.7] }),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 0.1 }),
            1,
        )
        .unwrap();
        let lin = feynman_kac(&c, |y| y[0], &[0.2], 1.0, 20, 20_000, 2).unwrap();
        assert!(lin.agrees_with(0.2 - 0.7, 0.0, 3.5), "{lin:?}");
    }

    #[test]
    fn tanh_weight_short_time() {
        let m = build_model(
            Drift::Known(DriftSpec::Tanh { amplitude: 1.0, scale: 1.0 }),
            Initial::Known(InitialSpec::Gaussian { mean: vec![0.0], width: 0.1 }),
            1,
        )
        .unwrap();
        let t = 0.02;
        let q = feynman_kac(&m, |_| 1.0, &[0.4], t, 20, 4000, 8).unwrap();
        let sech2 = 1.0 / 0.4f64.cosh().powi(2);
        assert_abs_diff_eq!(q.mean, 1.0 - t * sech2, epsilon = 2e-3);
    }

    #[test]
    fn exclusion_limit_enforced() {
        use crate::model::CustomDrift;
        let field: crate::model::VectorField = Arc::new(|x: &[f64], out: &mut [f64]| {
            out[0] = if x[0] > 0.5 { f64::NAN } else { 0.0 };
        });
        let drift = Drift::Custom(CustomDrift { label: "nan".into(), field, partials: None });
        // bypass validation: the sample grid would reject this drift
        let mut model = bm_model();
        model.drift = drift;
        let err = simulate(&model, 1.0, 10, 1000, true, 1).unwrap_err();
        assert!(matches!(err, crate::Error::Run(_)));
    }
}

//! Kernel `Γ = Γ0 + Γ1` of the dual (Feynman–Kac) semigroup
//! `Q_t f(x) = E[f(Y_t^x) exp(-∫ div B(Y_u) du)]`, `dY = -B(Y)dt + dW`.
//!
//! Closed forms exist for zero and constant drift, where `div B = 0` and
//! `Γ(x, y; t) = φ_d(y - x + μt; t)`. General drifts go through Monte Carlo
//! cell averages.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::kernels::{phi, phi_unchecked, KernelEstimateParams};
use crate::mc::{dual_paths, McEstimate};
use crate::model::{Drift, DriftKind, DriftSpec, ModelSpec, Profile};
use crate::quad::{integrate_adaptive, Rule};
use crate::MAX_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    ExactZeroDrift,
    ExactConstantDrift,
    McEstimate,
}

/// Settings for Monte Carlo kernel estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McKernelSettings {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Cell half-width in every coordinate, also the difference step of
    /// [`KernelEval::d_gamma_dx1`].
    pub half_width: f64,
    /// Minimum number of hits below which estimates are flagged.
    pub min_hits: usize,
}

impl Default for McKernelSettings {
    fn default() -> Self {
        McKernelSettings { n_paths: 100_000, n_steps: 100, seed: 0, half_width: 0.05, min_hits: 100 }
    }
}

/// Evaluator of `Γ` bound to one model.
#[derive(Debug, Clone)]
pub struct KernelEval {
    pub model: ModelSpec,
    pub mode: KernelMode,
    pub params: Option<KernelEstimateParams>,
    pub mc: McKernelSettings,
    mu: [f64; MAX_DIM],
}

/// `Γ0(x, y; t)`, the heat kernel.
pub fn gamma0(x: &[f64], y: &[f64], t: f64) -> Result<f64> {
    let mut u = [0.0; MAX_DIM];
    for k in 0..x.len() {
        u[k] = x[k] - y[k];
    }
    phi(&u[..x.len()], t)
}

/// Constant drift vector of a zero- or constant-drift model.
pub fn constant_drift(model: &ModelSpec) -> Result<[f64; MAX_DIM]> {
    let mut mu = [0.0; MAX_DIM];
    match (&model.drift_kind, &model.drift) {
        (DriftKind::Zero, _) => {}
        (DriftKind::Constant, Drift::Known(DriftSpec::Constant { mu: m })) => mu[..model.d].copy_from_slice(m),
        (DriftKind::Constant, d) => d.eval(&[0.0; MAX_DIM][..model.d], &mut mu[..model.d]),
        (DriftKind::General, _) => bail!(Unsupported, "no closed-form kernel for a general drift; use the Monte Carlo mode"),
    }
    Ok(mu)
}

/// `(Γ, Γ1)` for zero or constant drift.
pub fn gamma_exact(x: &[f64], y: &[f64], t: f64, model: &ModelSpec) -> Result<(f64, f64)> {
    let mu = constant_drift(model)?;
    let g0 = gamma0(x, y, t)?;
    if model.drift_kind == DriftKind::Zero {
        return Ok((g0, 0.0));
    }
    let mut u = [0.0; MAX_DIM];
    for k in 0..x.len() {
        u[k] = y[k] - x[k] + mu[k] * t;
    }
    let g = phi_unchecked(&u[..x.len()], t);
    Ok((g, g - g0))
}

/// Monte Carlo cell average of `Γ(x, ·; t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKernel {
    pub value: f64,
    pub std_err: f64,
    pub hits: usize,
    pub low_statistics: bool,
}

/// Weighted hit frequency of the box `[lo, hi]` divided by its volume.
pub fn gamma_mc(x: &[f64], lo: &[f64], hi: &[f64], t: f64, model: &ModelSpec, settings: &McKernelSettings) -> Result<CellKernel> {
    if !(t > 0.0) {
        bail!(Domain, "t must be positive");
    }
    let d = model.d;
    let mut vol = 1.0;
    for k in 0..d {
        if !(hi[k] > lo[k]) {
            bail!(Domain, "cell must have positive volume");
        }
        vol *= hi[k] - lo[k];
    }
    let batch = dual_paths(model, x, t, settings.n_steps, settings.n_paths, settings.seed)?;
    let w = batch.weights.as_ref().expect("weights requested");
    let s = batch.last();
    let mut hits = 0usize;
    let est = McEstimate::from_samples((0..batch.n_paths).map(|i| {
        let y = batch.state(s, i);
        let inside = (0..d).all(|k| y[k] >= lo[k] && y[k] < hi[k]);
        if inside {
            hits += 1;
            w[s][i] / vol
        } else {
            0.0
        }
    }));
    Ok(CellKernel {
        value: if hits == 0 { 0.0 } else { est.mean },
        std_err: est.std_err,
        hits,
        low_statistics: hits < settings.min_hits,
    })
}

impl KernelEval {
    pub fn new(model: &ModelSpec, mode: KernelMode) -> Result<Self> {
        let ok = match mode {
            KernelMode::ExactZeroDrift => model.drift_kind == DriftKind::Zero,
            KernelMode::ExactConstantDrift => model.drift_kind == DriftKind::Constant,
            KernelMode::McEstimate => true,
        };
        if !ok {
            bail!(Unsupported, "kernel mode {mode:?} does not match drift kind {:?}", model.drift_kind);
        }
        let mu = if mode == KernelMode::McEstimate { [0.0; MAX_DIM] } else { constant_drift(model)? };
        Ok(KernelEval { model: model.clone(), mode, params: None, mc: McKernelSettings::default(), mu })
    }

    /// Exact mode when the drift allows it, Monte Carlo otherwise.
    pub fn auto(model: &ModelSpec) -> Self {
        let mode = match model.drift_kind {
            DriftKind::Zero => KernelMode::ExactZeroDrift,
            DriftKind::Constant => KernelMode::ExactConstantDrift,
            DriftKind::General => KernelMode::McEstimate,
        };
        KernelEval::new(model, mode).expect("mode chosen from drift kind")
    }

    pub fn with_params(mut self, params: KernelEstimateParams) -> Self {
        self.params = Some(params);
        self
    }

    pub fn with_mc(mut self, mc: McKernelSettings) -> Self {
        self.mc = mc;
        self
    }

    pub fn is_exact(&self) -> bool {
        self.mode != KernelMode::McEstimate
    }

    pub fn drift(&self) -> &[f64] {
        &self.mu[..self.model.d]
    }

    /// `Γ(x, y; t)`; Monte Carlo mode returns the cell average around `y`.
    pub fn gamma(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        if self.is_exact() {
            return Ok(gamma_exact(x, y, t, &self.model)?.0);
        }
        let (lo, hi) = self.cell(y);
        let c = gamma_mc(x, &lo[..self.model.d], &hi[..self.model.d], t, &self.model, &self.mc)?;
        Ok(c.value)
    }

    fn cell(&self, y: &[f64]) -> ([f64; MAX_DIM], [f64; MAX_DIM]) {
        let mut lo = [0.0; MAX_DIM];
        let mut hi = [0.0; MAX_DIM];
        for k in 0..self.model.d {
            lo[k] = y[k] - self.mc.half_width;
            hi[k] = y[k] + self.mc.half_width;
        }
        (lo, hi)
    }

    /// `∂_{x¹}Γ(x, y; t)` and whether it is only first-order accurate.
    pub fn d_gamma_dx1(&self, x: &[f64], y: &[f64], t: f64) -> Result<(f64, bool)> {
        if !(t > 0.0) {
            bail!(Domain, "t must be positive");
        }
        let d = self.model.d;
        if self.is_exact() {
            let mut u = [0.0; MAX_DIM];
            for k in 0..d {
                u[k] = y[k] - x[k] + self.mu[k] * t;
            }
            return Ok((u[0] / t * phi_unchecked(&u[..d], t), false));
        }
        let h = self.mc.half_width;
        let mut xp = [0.0; MAX_DIM];
        let mut xm = [0.0; MAX_DIM];
        xp[..d].copy_from_slice(x);
        xm[..d].copy_from_slice(x);
        xp[0] += h;
        xm[0] -= h;
        let (lo, hi) = self.cell(y);
        let a = gamma_mc(&xp[..d], &lo[..d], &hi[..d], t, &self.model, &self.mc)?;
        let b = gamma_mc(&xm[..d], &lo[..d], &hi[..d], t, &self.model, &self.mc)?;
        if a.low_statistics || b.low_statistics {
            bail!(LowStatistics, "kernel difference quotient from {} and {} hits", a.hits, b.hits);
        }
        Ok(((a.value - b.value) / (2.0 * h), true))
    }

    /// `(∫Γ(x,z;s)Γ(z,y;r)dz, Γ(x,y;s+r))` by per-coordinate quadrature; the
    /// exact kernels factor over coordinates.
    pub fn chapman_kolmogorov(&self, x: &[f64], y: &[f64], s: f64, r: f64) -> Result<(f64, f64)> {
        if !self.is_exact() {
            bail!(Unsupported, "Chapman–Kolmogorov check needs an exact kernel");
        }
        let mut composed = 1.0;
        for k in 0..self.model.d {
            let mu = self.mu[k];
            let center = x[k] - mu * s;
            let spread = 12.0 * (s + r).sqrt();
            let (v, _) = integrate_adaptive(
                |z| {
                    crate::special::gauss1(z - x[k] + mu * s, s) * crate::special::gauss1(y[k] - z + mu * r, r)
                },
                center.min(y[k]) - spread,
                center.max(y[k]) + spread,
                1e-14,
                1e-12,
            )?;
            composed *= v;
        }
        Ok((composed, self.gamma(x, y, s + r)?))
    }

    /// `Q_τ f(y) = ∫ f(z)Γ(y, z; τ)dz` for `d = 1` with an exact kernel,
    /// after centring the Gaussian: `z = y - μτ + √τ·ξ`.
    pub fn apply(&self, f: &dyn Fn(f64) -> f64, y: f64, tau: f64, rule: &Rule) -> Result<f64> {
        if !self.is_exact() || self.model.d != 1 {
            bail!(Unsupported, "kernel application needs an exact kernel in one dimension");
        }
        if tau == 0.0 {
            return Ok(f(y));
        }
        let c = y - self.mu[0] * tau;
        let s = tau.sqrt();
        Ok(rule.integrate(-10.0, 10.0, |xi| f(c + s * xi) * crate::special::norm_pdf(xi)))
    }
}

/// One sampled kernel value for envelope fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSample {
    pub x: [f64; MAX_DIM],
    pub y: [f64; MAX_DIM],
    pub t: f64,
    pub value: f64,
}

/// Fit of `|v| ≤ C t^{-(d+order)/2 + α/2} exp(-|x-y|²/(c t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeFit {
    pub constant: f64,
    pub alpha: f64,
    pub inflation: f64,
    /// `(t, largest ratio |v|/envelope at that t)`, ascending in `t`.
    pub profile: Vec<(f64, f64)>,
    /// Samples exceeding the fitted envelope (none by construction).
    pub violations: usize,
}

/// Fits the minimal constant of the Hölder-improved Gaussian envelope.
/// `order` is 0 for `Γ1` and 1 for `∂_{x¹}Γ1`.
pub fn gamma_envelope_check(samples: &[KernelSample], d: usize, order: u32, params: &KernelEstimateParams) -> EnvelopeFit {
    let alpha = params.alpha;
    let c = params.inflation;
    let envelope = |s: &KernelSample| {
        let mut r2 = 0.0;
        for k in 0..d {
            r2 += (s.x[k] - s.y[k]).powi(2);
        }
        s.t.powf(-((d as f64 + order as f64) / 2.0) + alpha / 2.0) * (-r2 / (c * s.t)).exp()
    };
    let mut constant: f64 = 0.0;
    let mut profile: Vec<(f64, f64)> = Vec::new();
    for s in samples {
        let env = envelope(s);
        let ratio = if env > 0.0 { s.value.abs() / env } else if s.value == 0.0 { 0.0 } else { f64::INFINITY };
        constant = constant.max(ratio);
        match profile.iter_mut().find(|(t, _)| *t == s.t) {
            Some(p) => p.1 = p.1.max(ratio),
            None => profile.push((s.t, ratio)),
        }
    }
    profile.sort_by(|a, b| a.0.total_cmp(&b.0));
    let violations = samples.iter().filter(|s| s.value.abs() > constant * envelope(s) * (1.0 + 1e-12)).count();
    EnvelopeFit { constant, alpha, inflation: c, profile, violations }
}

/// Samples `Γ1` (order 0) or `∂_{x¹}Γ1` (order 1) of an exact kernel on a
/// tensor grid of `x¹ - y¹` offsets in `[-span, span]` and the given times;
/// other coordinates of `x` and `y` coincide.
pub fn sample_gamma1(kernel: &KernelEval, order: u32, span: f64, n: usize, times: &[f64]) -> Result<Vec<KernelSample>> {
    if !kernel.is_exact() {
        bail!(Unsupported, "exact kernel required for envelope sampling");
    }
    let d = kernel.model.d;
    let mut out = Vec::with_capacity(n * times.len());
    for &t in times {
        for i in 0..n {
            let off = -span + 2.0 * span * i as f64 / (n - 1).max(1) as f64;
            let x = [0.0; MAX_DIM];
            let mut y = [0.0; MAX_DIM];
            y[0] = off;
            let value = match order {
                0 => gamma_exact(&x[..d], &y[..d], t, &kernel.model)?.1,
                _ => {
                    let (dg, _) = kernel.d_gamma_dx1(&x[..d], &y[..d], t)?;
                    let g0 = gamma0(&x[..d], &y[..d], t)?;
                    let dg0 = (y[0] - x[0]) / t * g0;
                    dg - dg0
                }
            };
            out.push(KernelSample { x, y, t, value });
        }
    }
    Ok(out)
}

/// Residual of the mild solution `u(t) = Q_t u0 + ∫₀ᵗ Q_{t-s} f ds` against
/// the weak form of `u' = ℒ*u + f` at one resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallLevel {
    pub h: f64,
    pub dt: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallReport {
    pub levels: Vec<BallLevel>,
    /// `log2(R_k / R_{k+1})` between consecutive levels.
    pub orders: Vec<f64>,
}

impl BallReport {
    pub fn min_order(&self) -> f64 {
        self.orders.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Builds `u` at grid nodes by kernel quadrature for a time-independent
/// source `f` and initial value `u0`, then evaluates
/// `∫F u(T) - ∫F u0 - ∫₀ᵀ∫(ℒF)u - ∫₀ᵀ∫F f` with the trapezoid rule in space
/// and time. Starts from `n_space` nodes on `[-box, box]` and `n_time` steps,
/// doubling both `levels - 1` times.
#[allow(clippy::too_many_arguments)]
pub fn ball_weak_residual(
    kernel: &KernelEval,
    u0: &Profile,
    source: &Profile,
    test: &Profile,
    horizon: f64,
    half_box: f64,
    n_space: usize,
    n_time: usize,
    levels: usize,
) -> Result<BallReport> {
    if kernel.model.d != 1 {
        bail!(Unsupported, "the mild-solution check runs in one dimension");
    }
    let mu = kernel.mu[0];
    let rule = Rule::gauss_legendre(160);
    let (t_lo, t_hi) = test.support();
    if t_lo < -half_box || t_hi > half_box {
        bail!(Support, "test function support exceeds the box");
    }
    let f0 = |y: f64| u0.value(y);
    let fs = |y: f64| source.value(y);
    // ℒF with the forward generator B·∇ + ½Δ
    let lf = |y: f64| {
        let (_, d1, d2) = test.eval(y);
        mu * d1 + 0.5 * d2
    };
    let src_mass = {
        let (a, b) = source.support();
        let r = Rule::gauss_legendre(64);
        let (c0, c1) = test.support();
        r.integrate(a.max(c0), b.min(c1), |y| test.value(y) * fs(y))
    };
    let mut levels_out = Vec::with_capacity(levels);
    for level in 0..levels {
        let ns = (n_space - 1) * (1 << level) + 1;
        let nt = n_time * (1 << level);
        let h = 2.0 * half_box / (ns - 1) as f64;
        let dt = horizon / nt as f64;
        let ys: Vec<f64> = (0..ns).map(|i| -half_box + h * i as f64).collect();
        let active: Vec<usize> = (0..ns).filter(|&i| ys[i] > t_lo && ys[i] < t_hi).collect();
        // u at active nodes for every slice, the time integral of Q_τ f by
        // Gauss–Legendre on each step
        let steps = Rule::gauss_legendre(8);
        let mut u = alloc::vec![alloc::vec![0.0; active.len()]; nt + 1];
        let mut acc_src = alloc::vec![0.0; active.len()];
        for (a, &i) in active.iter().enumerate() {
            u[0][a] = f0(ys[i]);
        }
        for k in 1..=nt {
            let t = k as f64 * dt;
            for (a, &i) in active.iter().enumerate() {
                let y = ys[i];
                let mut piece = 0.0;
                for (z, w) in steps.nodes.iter().zip(&steps.weights) {
                    let tau = (k as f64 - 1.0) * dt + 0.5 * dt * (1.0 + z);
                    piece += 0.5 * dt * w * kernel.apply(&fs, y, tau, &rule)?;
                }
                acc_src[a] += piece;
                u[k][a] = kernel.apply(&f0, y, t, &rule)? + acc_src[a];
            }
        }
        let space = |g: &dyn Fn(usize) -> f64| -> f64 { active.iter().enumerate().map(|(a, _)| g(a)).sum::<f64>() * h };
        let lhs = space(&|a| test.value(ys[active[a]]) * u[nt][a]);
        let init = space(&|a| test.value(ys[active[a]]) * u[0][a]);
        let mut gen = 0.0;
        for k in 0..=nt {
            let w = if k == 0 || k == nt { 0.5 } else { 1.0 };
            gen += w * dt * space(&|a| lf(ys[active[a]]) * u[k][a]);
        }
        let residual = lhs - init - gen - horizon * src_mass;
        levels_out.push(BallLevel { h, dt, residual });
    }
    let orders = levels_out.windows(2).map(|w| (w[0].residual.abs() / w[1].residual.abs()).log2()).collect();
    Ok(BallReport { levels: levels_out, orders })
}

/// `sup over probes of |Q_t f - f|` for each `t`.
pub fn strong_continuity_profile(kernel: &KernelEval, f: &Profile, probes: &[f64], times: &[f64]) -> Result<Vec<(f64, f64)>> {
    let rule = Rule::gauss_legendre(160);
    let g = |y: f64| f.value(y);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut worst: f64 = 0.0;
        for &y in probes {
            worst = worst.max((kernel.apply(&g, y, t, &rule)? - g(y)).abs());
        }
        out.push((t, worst));
    }
    Ok(out)
}

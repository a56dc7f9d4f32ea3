//! Problem definition: drift field, initial law, triangular grids, gridded
//! joint densities and separable test functions.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::quad::Rule;
use crate::special::{gauss1, norm_cdf};
use crate::MAX_DIM;

/// Closed-form drift descriptors.
///
/// `Tanh` and `Sine` act coordinate-wise: `Bᵏ(x) = a·tanh(s·xᵏ)` and
/// `Bᵏ(x) = a·sin(ω·xᵏ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftSpec {
    Zero,
    Constant { mu: Vec<f64> },
    Tanh { amplitude: f64, scale: f64 },
    Sine { amplitude: f64, frequency: f64 },
}

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// User supplied drift. Without `partials` the diagonal derivatives
/// `∂ₖBᵏ` fall back to central differences.
#[derive(Clone)]
pub struct CustomDrift {
    pub label: String,
    pub field: VectorField,
    pub partials: Option<VectorField>,
}

impl fmt::Debug for CustomDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDrift")
            .field("label", &self.label)
            .field("analytic_partials", &self.partials.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum Drift {
    Known(DriftSpec),
    Custom(CustomDrift),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Zero,
    Constant,
    General,
}

/// Central-difference step used when analytic derivatives are missing.
#[inline]
pub fn fd_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

impl Drift {
    /// Evaluates `B(x)` into `out[..x.len()]`.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Known(DriftSpec::Zero) => out[..x.len()].fill(0.0),
            Drift::Known(DriftSpec::Constant { mu }) => out[..x.len()].copy_from_slice(&mu[..x.len()]),
            Drift::Known(DriftSpec::Tanh { amplitude, scale }) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = amplitude * (scale * v).tanh();
                }
            }
            Drift::Known(DriftSpec::Sine { amplitude, frequency }) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = amplitude * (frequency * v).sin();
                }
            }
            Drift::Custom(c) => (c.field)(x, out),
        }
    }

    /// First drift component at a one-dimensional state.
    #[inline]
    pub fn eval1(&self, x: f64) -> f64 {
        match self {
            Drift::Known(DriftSpec::Zero) => 0.0,
            Drift::Known(DriftSpec::Constant { mu }) => mu[0],
            Drift::Known(DriftSpec::Tanh { amplitude, scale }) => amplitude * (scale * x).tanh(),
            Drift::Known(DriftSpec::Sine { amplitude, frequency }) => amplitude * (frequency * x).sin(),
            Drift::Custom(c) => {
                let mut o = [0.0];
                (c.field)(&[x], &mut o);
                o[0]
            }
        }
    }

    /// Diagonal partial derivatives `∂ₖBᵏ(x)`.
    pub fn partials(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        match self {
            Drift::Known(DriftSpec::Zero) | Drift::Known(DriftSpec::Constant { .. }) => out[..d].fill(0.0),
            Drift::Known(DriftSpec::Tanh { amplitude, scale }) => {
                for (o, v) in out.iter_mut().zip(x) {
                    let c = (scale * v).cosh();
                    *o = amplitude * scale / (c * c);
                }
            }
            Drift::Known(DriftSpec::Sine { amplitude, frequency }) => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = amplitude * frequency * (frequency * v).cos();
                }
            }
            Drift::Custom(c) => match &c.partials {
                Some(p) => p(x, out),
                None => {
                    let mut xp = [0.0; MAX_DIM];
                    let mut bp = [0.0; MAX_DIM];
                    let mut bm = [0.0; MAX_DIM];
                    xp[..d].copy_from_slice(x);
                    for k in 0..d {
                        let h = fd_step(x[k]);
                        xp[k] = x[k] + h;
                        (c.field)(&xp[..d], &mut bp[..d]);
                        xp[k] = x[k] - h;
                        (c.field)(&xp[..d], &mut bm[..d]);
                        xp[k] = x[k];
                        out[k] = (bp[k] - bm[k]) / (2.0 * h);
                    }
                }
            },
        }
    }

    pub fn divergence(&self, x: &[f64]) -> f64 {
        let mut p = [0.0; MAX_DIM];
        self.partials(x, &mut p[..x.len()]);
        p[..x.len()].iter().sum()
    }

    pub fn has_analytic_partials(&self) -> bool {
        match self {
            Drift::Known(_) => true,
            Drift::Custom(c) => c.partials.is_some(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Drift::Known(DriftSpec::Zero) => "zero".into(),
            Drift::Known(DriftSpec::Constant { mu }) => alloc::format!("constant{mu:?}"),
            Drift::Known(DriftSpec::Tanh { amplitude, scale }) => alloc::format!("tanh(a={amplitude},s={scale})"),
            Drift::Known(DriftSpec::Sine { amplitude, frequency }) => alloc::format!("sine(a={amplitude},w={frequency})"),
            Drift::Custom(c) => c.label.clone(),
        }
    }
}

/// Initial law descriptors. `Gaussian` is isotropic with standard deviation
/// `width`; a narrow Gaussian stands in for a point mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    Gaussian { mean: Vec<f64>, width: f64 },
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
}

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Initial density given as a function on a box; renormalized on construction.
#[derive(Clone)]
pub struct CustomInitial {
    pub label: String,
    pub density: ScalarField,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl fmt::Debug for CustomInitial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomInitial").field("label", &self.label).field("lo", &self.lo).field("hi", &self.hi).finish()
    }
}

#[derive(Debug, Clone)]
pub enum Initial {
    Known(InitialSpec),
    Custom(CustomInitial),
}

/// Weighted point of a quadrature for the initial law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub x: [f64; MAX_DIM],
    pub w: f64,
}

/// Validated initial law: density, norms and quadrature atoms.
#[derive(Debug, Clone)]
pub struct InitialLaw {
    pub law: Initial,
    pub d: usize,
    /// multiplies a custom density so that it integrates to one
    pub scale: f64,
    pub l1: f64,
    pub l2: f64,
    /// sup of the density on the validation sample (rejection sampling bound)
    pub sup: f64,
}

fn tensor_atoms(d: usize, rule_x: &[Vec<f64>], rule_w: &[Vec<f64>]) -> Vec<Atom> {
    let mut out = Vec::new();
    let n: Vec<usize> = rule_x.iter().map(|r| r.len()).collect();
    let total: usize = n.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut a = Atom { x: [0.0; MAX_DIM], w: 1.0 };
        for k in 0..d {
            let i = rem % n[k];
            rem /= n[k];
            a.x[k] = rule_x[k][i];
            a.w *= rule_w[k][i];
        }
        out.push(a);
    }
    out
}

impl InitialLaw {
    pub fn density(&self, x: &[f64]) -> f64 {
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { mean, width }) => {
                x.iter().zip(mean).map(|(v, m)| gauss1(v - m, width * width)).product()
            }
            Initial::Known(InitialSpec::Uniform { lo, hi }) => {
                let mut vol = 1.0;
                for k in 0..x.len() {
                    if x[k] < lo[k] || x[k] > hi[k] {
                        return 0.0;
                    }
                    vol *= hi[k] - lo[k];
                }
                1.0 / vol
            }
            Initial::Custom(c) => {
                for k in 0..x.len() {
                    if x[k] < c.lo[k] || x[k] > c.hi[k] {
                        return 0.0;
                    }
                }
                self.scale * (c.density)(x)
            }
        }
    }

    /// Quadrature atoms with `n` points per coordinate: Gauss–Hermite for a
    /// Gaussian, composite Gauss–Legendre over the box otherwise.
    pub fn atoms(&self, n: usize) -> Vec<Atom> {
        let n = n.max(1);
        let d = self.d;
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { mean, width }) => {
                let r = Rule::gauss_hermite_normal(n);
                let xs: Vec<Vec<f64>> = (0..d).map(|k| r.nodes.iter().map(|z| mean[k] + width * z).collect()).collect();
                let ws: Vec<Vec<f64>> = (0..d).map(|_| r.weights.clone()).collect();
                tensor_atoms(d, &xs, &ws)
            }
            Initial::Known(InitialSpec::Uniform { lo, hi }) => {
                let r = Rule::gauss_legendre(n);
                let xs: Vec<Vec<f64>> =
                    (0..d).map(|k| r.nodes.iter().map(|z| 0.5 * (lo[k] + hi[k]) + 0.5 * (hi[k] - lo[k]) * z).collect()).collect();
                let ws: Vec<Vec<f64>> = (0..d).map(|_| r.weights.iter().map(|w| 0.5 * w).collect()).collect();
                tensor_atoms(d, &xs, &ws)
            }
            Initial::Custom(c) => {
                let r = Rule::gauss_legendre(n);
                let xs: Vec<Vec<f64>> =
                    (0..d).map(|k| r.nodes.iter().map(|z| 0.5 * (c.lo[k] + c.hi[k]) + 0.5 * (c.hi[k] - c.lo[k]) * z).collect()).collect();
                let ws: Vec<Vec<f64>> =
                    (0..d).map(|k| r.weights.iter().map(|w| 0.5 * (c.hi[k] - c.lo[k]) * w).collect()).collect();
                let mut atoms = tensor_atoms(d, &xs, &ws);
                let mut total = 0.0;
                for a in atoms.iter_mut() {
                    a.w *= self.density(&a.x[..d]);
                    total += a.w;
                }
                if total > 0.0 {
                    for a in atoms.iter_mut() {
                        a.w /= total;
                    }
                }
                atoms
            }
        }
    }

    /// Atoms for the part of the law with `x¹ ≤ cap`, weighted by mass (not
    /// renormalized). The first coordinate uses Gauss–Legendre on the truncated
    /// range so integrands with a kink at `x¹ = cap` still converge quickly.
    pub fn truncated_atoms(&self, n: usize, cap: f64) -> Vec<Atom> {
        let n = n.max(1);
        let d = self.d;
        let (lo1, hi1) = self.first_coordinate_span();
        let top = hi1.min(cap);
        if top <= lo1 {
            return Vec::new();
        }
        let gl = Rule::gauss_legendre(n);
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ws: Vec<Vec<f64>> = Vec::with_capacity(d);
        let half = 0.5 * (top - lo1);
        xs.push(gl.nodes.iter().map(|z| lo1 + half * (1.0 + z)).collect());
        ws.push(gl.weights.iter().map(|w| half * w).collect());
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { mean, width }) => {
                let gh = Rule::gauss_hermite_normal(n);
                for k in 1..d {
                    xs.push(gh.nodes.iter().map(|z| mean[k] + width * z).collect());
                    ws.push(gh.weights.clone());
                }
                let mut atoms = tensor_atoms(d, &xs, &ws);
                for a in atoms.iter_mut() {
                    a.w *= gauss1(a.x[0] - mean[0], width * width);
                }
                atoms
            }
            Initial::Known(InitialSpec::Uniform { lo, hi }) => {
                for k in 1..d {
                    let h = 0.5 * (hi[k] - lo[k]);
                    xs.push(gl.nodes.iter().map(|z| lo[k] + h * (1.0 + z)).collect());
                    ws.push(gl.weights.iter().map(|w| h * w).collect());
                }
                let mut atoms = tensor_atoms(d, &xs, &ws);
                for a in atoms.iter_mut() {
                    a.w *= self.density(&a.x[..d]);
                }
                atoms
            }
            Initial::Custom(c) => {
                for k in 1..d {
                    let h = 0.5 * (c.hi[k] - c.lo[k]);
                    xs.push(gl.nodes.iter().map(|z| c.lo[k] + h * (1.0 + z)).collect());
                    ws.push(gl.weights.iter().map(|w| h * w).collect());
                }
                let mut atoms = tensor_atoms(d, &xs, &ws);
                for a in atoms.iter_mut() {
                    a.w *= self.density(&a.x[..d]);
                }
                atoms
            }
        }
    }

    /// Mean of the law (first coordinate used for the supremum start).
    pub fn mean(&self) -> [f64; MAX_DIM] {
        let mut m = [0.0; MAX_DIM];
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { mean, .. }) => m[..self.d].copy_from_slice(&mean[..self.d]),
            Initial::Known(InitialSpec::Uniform { lo, hi }) => {
                for k in 0..self.d {
                    m[k] = 0.5 * (lo[k] + hi[k]);
                }
            }
            Initial::Custom(_) => {
                for a in self.atoms(24) {
                    for k in 0..self.d {
                        m[k] += a.w * a.x[k];
                    }
                }
            }
        }
        m
    }

    /// Standard deviation of a Gaussian law, `None` otherwise.
    pub fn gaussian_width(&self) -> Option<f64> {
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { width, .. }) => Some(*width),
            _ => None,
        }
    }

    /// Bounding interval of the first coordinate carrying all but ~1e-15 of the mass.
    pub fn first_coordinate_span(&self) -> (f64, f64) {
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { mean, width }) => (mean[0] - 8.0 * width, mean[0] + 8.0 * width),
            Initial::Known(InitialSpec::Uniform { lo, hi }) => (lo[0], hi[0]),
            Initial::Custom(c) => (c.lo[0], c.hi[0]),
        }
    }

    /// Draws `X₀` from standard normals `z` and a uniform `u` (rejection for custom laws).
    pub fn sample<R: rand_core::RngCore>(&self, rng: &mut R, out: &mut [f64]) {
        use rand_distr::{Distribution, Standard, StandardNormal};
        match &self.law {
            Initial::Known(InitialSpec::Gaussian { mean, width }) => {
                for k in 0..self.d {
                    let z: f64 = StandardNormal.sample(rng);
                    out[k] = mean[k] + width * z;
                }
            }
            Initial::Known(InitialSpec::Uniform { lo, hi }) => {
                for k in 0..self.d {
                    let u: f64 = Standard.sample(rng);
                    out[k] = lo[k] + (hi[k] - lo[k]) * u;
                }
            }
            Initial::Custom(c) => loop {
                for k in 0..self.d {
                    let u: f64 = Standard.sample(rng);
                    out[k] = c.lo[k] + (c.hi[k] - c.lo[k]) * u;
                }
                let u: f64 = Standard.sample(rng);
                if u * self.sup * 1.05 <= self.density(&out[..self.d]) {
                    break;
                }
            },
        }
    }
}

/// Validated problem definition for `dX = B(X)dt + dW`, `X₀ ~ f0`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub d: usize,
    pub drift: Drift,
    pub drift_bound: f64,
    pub divergence_bound: f64,
    pub drift_kind: DriftKind,
    pub numeric_derivative: bool,
    pub initial: InitialLaw,
}

/// Half-width of the cube sampled when validating drift bounds.
pub const VALIDATION_RADIUS: f64 = 20.0;

fn sample_grid(d: usize) -> Vec<[f64; MAX_DIM]> {
    let n = match d {
        1 => 4001usize,
        2 => 201,
        _ => 41,
    };
    let step = 2.0 * VALIDATION_RADIUS / (n - 1) as f64;
    let total = n.pow(d as u32);
    let mut pts = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut p = [0.0; MAX_DIM];
        for v in p.iter_mut().take(d) {
            *v = -VALIDATION_RADIUS + step * (rem % n) as f64;
            rem /= n;
        }
        pts.push(p);
    }
    pts
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds and validates a model.
pub fn build_model(drift: Drift, initial: Initial, d: usize) -> Result<ModelSpec> {
    if d == 0 || d > MAX_DIM {
        bail!(Config, "dimension must be in 1..={MAX_DIM}, got {d}");
    }
    match &drift {
        Drift::Known(DriftSpec::Constant { mu }) if mu.len() != d => {
            bail!(Config, "constant drift has {} components for dimension {d}", mu.len())
        }
        Drift::Known(DriftSpec::Tanh { amplitude, scale }) | Drift::Known(DriftSpec::Sine { amplitude, frequency: scale })
            if !(amplitude.is_finite() && scale.is_finite()) =>
        {
            bail!(Config, "drift parameters must be finite")
        }
        _ => {}
    }
    let pts = sample_grid(d);
    let mut sample_bound: f64 = 0.0;
    let mut sample_div: f64 = 0.0;
    let mut all_zero = true;
    let mut first: Option<[f64; MAX_DIM]> = None;
    let mut all_const = true;
    let mut b = [0.0; MAX_DIM];
    for p in &pts {
        drift.eval(&p[..d], &mut b[..d]);
        if b[..d].iter().any(|v| !v.is_finite() || v.abs() > 1e8) {
            bail!(Validation, "drift unbounded or non-finite at sample point {:?}", &p[..d]);
        }
        let nb = norm(&b[..d]);
        sample_bound = sample_bound.max(nb);
        let dv = drift.divergence(&p[..d]);
        if !dv.is_finite() {
            bail!(Validation, "drift divergence non-finite at sample point {:?}", &p[..d]);
        }
        sample_div = sample_div.max(dv.abs());
        if nb != 0.0 {
            all_zero = false;
        }
        match first {
            None => first = Some(b),
            Some(f) => {
                if f[..d] != b[..d] {
                    all_const = false;
                }
            }
        }
    }
    let (drift_bound, divergence_bound) = match &drift {
        Drift::Known(DriftSpec::Zero) => (0.0, 0.0),
        Drift::Known(DriftSpec::Constant { mu }) => (norm(mu), 0.0),
        Drift::Known(DriftSpec::Tanh { amplitude, scale }) => {
            (amplitude.abs() * (d as f64).sqrt(), (amplitude * scale).abs() * d as f64)
        }
        Drift::Known(DriftSpec::Sine { amplitude, frequency }) => {
            (amplitude.abs() * (d as f64).sqrt(), (amplitude * frequency).abs() * d as f64)
        }
        Drift::Custom(_) => (sample_bound, sample_div),
    };
    if sample_bound > drift_bound * (1.0 + 1e-12) + 1e-300 || sample_div > divergence_bound * (1.0 + 1e-9) + 1e-300 {
        bail!(Validation, "declared drift bounds ({drift_bound}, {divergence_bound}) violated on the sample grid");
    }
    let drift_kind = if all_zero {
        DriftKind::Zero
    } else if all_const {
        DriftKind::Constant
    } else {
        DriftKind::General
    };
    let numeric_derivative = !drift.has_analytic_partials();
    let initial = validate_initial(initial, d)?;
    Ok(ModelSpec { d, drift, drift_bound, divergence_bound, drift_kind, numeric_derivative, initial })
}

/// Relative tolerance on the mass of the initial law.
pub const INITIAL_MASS_TOL: f64 = 1e-8;

fn validate_initial(law: Initial, d: usize) -> Result<InitialLaw> {
    match &law {
        Initial::Known(InitialSpec::Gaussian { mean, width }) => {
            if mean.len() != d || !(*width > 0.0 && width.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
                bail!(Config, "gaussian initial law needs {d} finite mean components and a positive width");
            }
            let l2 = (1.0 / (2.0 * core::f64::consts::PI.sqrt() * width)).powi(d as i32).sqrt();
            let sup = gauss1(0.0, width * width).powi(d as i32);
            Ok(InitialLaw { law, d, scale: 1.0, l1: 1.0, l2, sup })
        }
        Initial::Known(InitialSpec::Uniform { lo, hi }) => {
            if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
                bail!(Config, "uniform initial law needs {d} finite intervals with lo < hi");
            }
            let vol: f64 = lo.iter().zip(hi).map(|(a, b)| b - a).product();
            Ok(InitialLaw { law, d, scale: 1.0, l1: 1.0, l2: (1.0 / vol).sqrt(), sup: 1.0 / vol })
        }
        Initial::Custom(c) => {
            if c.lo.len() != d || c.hi.len() != d {
                bail!(Config, "custom initial law box must have {d} coordinates");
            }
            let mut tmp = InitialLaw { law: law.clone(), d, scale: 1.0, l1: 1.0, l2: 0.0, sup: 0.0 };
            // raw mass and L2 by a tensor Gauss–Legendre rule refined until stable
            let mass = |n: usize, power: i32, scale: f64| -> (f64, f64) {
                let r = Rule::gauss_legendre(n);
                let xs: Vec<Vec<f64>> =
                    (0..d).map(|k| r.nodes.iter().map(|z| 0.5 * (c.lo[k] + c.hi[k]) + 0.5 * (c.hi[k] - c.lo[k]) * z).collect()).collect();
                let ws: Vec<Vec<f64>> =
                    (0..d).map(|k| r.weights.iter().map(|w| 0.5 * (c.hi[k] - c.lo[k]) * w).collect()).collect();
                let mut acc = 0.0;
                let mut sup: f64 = 0.0;
                for a in tensor_atoms(d, &xs, &ws) {
                    let v = scale * (c.density)(&a.x[..d]);
                    if !(v >= 0.0) || !v.is_finite() {
                        return (f64::NAN, f64::NAN);
                    }
                    sup = sup.max(v);
                    acc += a.w * v.powi(power);
                }
                (acc, sup)
            };
            let n = if d == 1 { 400 } else if d == 2 { 80 } else { 30 };
            let (m1, _) = mass(n, 1, 1.0);
            let (m2, _) = mass(2 * n, 1, 1.0);
            if !m1.is_finite() || !(m2 > 0.0) || ((m1 - m2) / m2).abs() > 1e-6 {
                bail!(Config, "initial density '{}' is not normalizable (mass estimates {m1}, {m2})", c.label);
            }
            let scale = 1.0 / m2;
            let (l2sq, sup) = mass(2 * n, 2, scale);
            tmp.scale = scale;
            tmp.l2 = l2sq.sqrt();
            tmp.sup = sup;
            Ok(tmp)
        }
    }
}

// ---------------------------------------------------------------------------
// Grids

/// One uniformly spaced axis for a coordinate `x̃ᵏ`, `k ≥ 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub step: f64,
    pub n: usize,
}

impl Axis {
    #[inline]
    pub fn node(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }
    /// Trapezoid weight of node `i`.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        if self.n == 1 {
            1.0
        } else if i == 0 || i + 1 == self.n {
            0.5 * self.step
        } else {
            self.step
        }
    }
}

/// Grid on the triangular domain `{m ≥ x¹}`.
///
/// `m` and `x¹` share one lattice `zᵢ = origin + i·h`, so every diagonal point
/// `m = x¹` is a node. The `m` axis uses lattice indices `m_lo..=m_hi`, the
/// `x¹` axis `x_lo..=x_hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangularGrid {
    pub d: usize,
    pub origin: f64,
    pub h: f64,
    pub m_lo: i64,
    pub m_hi: i64,
    pub x_lo: i64,
    pub x_hi: i64,
    pub extra: Vec<Axis>,
    pub times: Vec<f64>,
    pub horizon: f64,
    pub m_box: f64,
}

/// Time slices `tₖ = T·(k/K)²`, uniform in `√t`.
pub fn sqrt_graded_times(horizon: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|i| horizon * (i as f64 / k as f64).powi(2)).collect()
}

pub fn uniform_times(horizon: f64, k: usize) -> Vec<f64> {
    (1..=k).map(|i| horizon * i as f64 / k as f64).collect()
}

impl TriangularGrid {
    /// Both `m` and `x¹` on `n` nodes spanning `[-m_box, m_box]`; `x̃` axes
    /// use `n_extra` nodes on the same interval.
    pub fn boxed(d: usize, m_box: f64, n: usize, n_extra: usize, times: Vec<f64>, horizon: f64) -> Result<Self> {
        if n < 3 {
            bail!(Config, "grid needs at least 3 nodes per axis");
        }
        let h = 2.0 * m_box / (n - 1) as f64;
        let extra = (1..d)
            .map(|_| Axis { lo: -m_box, step: 2.0 * m_box / (n_extra.max(2) - 1) as f64, n: n_extra.max(2) })
            .collect();
        let g = TriangularGrid {
            d,
            origin: -m_box,
            h,
            m_lo: 0,
            m_hi: n as i64 - 1,
            x_lo: 0,
            x_hi: n as i64 - 1,
            extra,
            times,
            horizon,
            m_box,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            bail!(Validation, "grid spacing must be positive");
        }
        if self.m_hi <= self.m_lo || self.x_hi <= self.x_lo {
            bail!(Validation, "grid index ranges must be nonempty");
        }
        if self.extra.len() + 1 != self.d {
            bail!(Validation, "grid needs {} extra axes for dimension {}", self.d - 1, self.d);
        }
        if self.extra.iter().any(|a| !(a.step > 0.0) || a.n < 1) {
            bail!(Validation, "extra axes need positive spacing");
        }
        if self.times.is_empty() || self.times[0] <= 0.0 {
            bail!(Validation, "time slices must be positive");
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            bail!(Validation, "time slices must be strictly increasing");
        }
        if *self.times.last().expect("nonempty") > self.horizon * (1.0 + 1e-12) {
            bail!(Validation, "last time slice exceeds the horizon");
        }
        Ok(())
    }

    #[inline]
    pub fn z(&self, i: i64) -> f64 {
        self.origin + self.h * i as f64
    }
    #[inline]
    pub fn n_m(&self) -> usize {
        (self.m_hi - self.m_lo + 1) as usize
    }
    #[inline]
    pub fn n_x(&self) -> usize {
        (self.x_hi - self.x_lo + 1) as usize
    }
    pub fn n_extra(&self) -> usize {
        self.extra.iter().map(|a| a.n).product()
    }
    pub fn n_slices(&self) -> usize {
        self.times.len()
    }
    /// Number of stored values per slice (active and inactive).
    pub fn slice_len(&self) -> usize {
        self.n_m() * self.n_x() * self.n_extra()
    }
    #[inline]
    pub fn m_at(&self, im: usize) -> f64 {
        self.z(self.m_lo + im as i64)
    }
    #[inline]
    pub fn x_at(&self, ix: usize) -> f64 {
        self.z(self.x_lo + ix as i64)
    }
    /// Flat index of `(im, ix, e)` where `e` enumerates the `x̃` nodes.
    #[inline]
    pub fn idx(&self, im: usize, ix: usize, e: usize) -> usize {
        (im * self.n_x() + ix) * self.n_extra() + e
    }
    /// Node `(m, x¹)` lies in the domain.
    #[inline]
    pub fn is_active(&self, im: usize, ix: usize) -> bool {
        self.m_lo + im as i64 >= self.x_lo + ix as i64
    }
    /// `x¹` index of the diagonal node of row `im`, if that row crosses it.
    #[inline]
    pub fn diag_ix(&self, im: usize) -> Option<usize> {
        let l = self.m_lo + im as i64;
        if l >= self.x_lo && l <= self.x_hi {
            Some((l - self.x_lo) as usize)
        } else {
            None
        }
    }
    /// Last active `x¹` index in row `im`.
    #[inline]
    pub fn row_end(&self, im: usize) -> Option<usize> {
        let l = self.m_lo + im as i64;
        if l < self.x_lo {
            None
        } else {
            Some(((l.min(self.x_hi)) - self.x_lo) as usize)
        }
    }
    /// Coordinates of extra node `e`.
    pub fn extra_point(&self, e: usize, out: &mut [f64]) {
        let mut rem = e;
        for (k, a) in self.extra.iter().enumerate().rev() {
            out[k] = a.node(rem % a.n);
            rem /= a.n;
        }
    }
    pub fn extra_weight(&self, e: usize) -> f64 {
        let mut rem = e;
        let mut w = 1.0;
        for a in self.extra.iter().rev() {
            w *= a.weight(rem % a.n);
            rem /= a.n;
        }
        w
    }
    /// Trapezoid weight of `(m, x¹)` over the triangle: rows are integrated
    /// from `x_lo` to the diagonal with half weight at both ends.
    #[inline]
    pub fn area_weight(&self, im: usize, ix: usize) -> f64 {
        let Some(end) = self.row_end(im) else { return 0.0 };
        if ix > end {
            return 0.0;
        }
        let wm = if im == 0 || im + 1 == self.n_m() { 0.5 } else { 1.0 };
        let wx = if end == 0 {
            0.0
        } else if ix == 0 || ix == end {
            0.5
        } else {
            1.0
        };
        wm * wx * self.h * self.h
    }
    /// Weight of diagonal node `im` for integrals along `m = x¹`.
    #[inline]
    pub fn diag_weight(&self, im: usize) -> f64 {
        if self.diag_ix(im).is_none() {
            return 0.0;
        }
        // trapezoid along the diagonal rows that exist
        let l = self.m_lo + im as i64;
        let first = self.m_lo.max(self.x_lo);
        let last = self.m_hi.min(self.x_hi);
        if l == first || l == last {
            0.5 * self.h
        } else {
            self.h
        }
    }
    /// Grid keeping every other lattice node and every other time slice
    /// (slices with even 1-based index).
    pub fn coarsen(&self) -> Result<Self> {
        self.coarsen_with(true, true)
    }
    /// Coarsens the lattice, the slice set, or both.
    pub fn coarsen_with(&self, space: bool, time: bool) -> Result<Self> {
        let even_up = |v: i64| if v % 2 == 0 { v } else { v + 1 };
        let even_dn = |v: i64| if v % 2 == 0 { v } else { v - 1 };
        let times: Vec<f64> =
            if time { self.times.iter().skip(1).step_by(2).copied().collect() } else { self.times.clone() };
        let (f, up, dn): (i64, &dyn Fn(i64) -> i64, &dyn Fn(i64) -> i64) =
            if space { (2, &even_up, &even_dn) } else { (1, &|v| v, &|v| v) };
        let extra = self
            .extra
            .iter()
            .map(|a| if space { Axis { lo: a.lo, step: 2.0 * a.step, n: a.n.div_ceil(2) } } else { *a })
            .collect();
        let g = TriangularGrid {
            d: self.d,
            origin: self.origin,
            h: f as f64 * self.h,
            m_lo: up(self.m_lo) / f,
            m_hi: dn(self.m_hi) / f,
            x_lo: up(self.x_lo) / f,
            x_hi: dn(self.x_hi) / f,
            extra,
            times,
            horizon: self.horizon,
            m_box: self.m_box,
        };
        g.validate()?;
        Ok(g)
    }
    /// Index of a stored slice equal to `t` (relative tolerance 1e-12).
    pub fn slice_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
    }
}

/// Mass of a Gaussian envelope `φ(·; 2T)`-type law escaping `[-M, M]` around
/// `center`, per coordinate (union bound over `d + 1` coordinates).
pub fn envelope_escape_mass(m_box: f64, center: f64, horizon: f64, drift_bound: f64, d: usize) -> f64 {
    let spread = (2.0 * horizon).sqrt();
    let reach = m_box - center.abs() - drift_bound * horizon;
    if reach <= 0.0 {
        return 1.0;
    }
    (d as f64 + 1.0) * 2.0 * norm_cdf(-reach / spread)
}

/// Smallest box half-width whose envelope escape mass is below `tol`.
pub fn choose_box(center: f64, horizon: f64, drift_bound: f64, d: usize, tol: f64) -> f64 {
    let mut m = center.abs() + drift_bound * horizon + 0.5;
    while envelope_escape_mass(m, center, horizon, drift_bound, d) >= tol {
        m += 0.05;
    }
    m
}

/// Origin of a gridded density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    Parametrix,
    MonteCarlo,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Exact => "exact",
            Provenance::Parametrix => "parametrix",
            Provenance::MonteCarlo => "monte_carlo",
        }
    }
}

/// `p(m, x; t)` on the nodes of a [`TriangularGrid`], one vector per slice,
/// plus the diagonal trace `p(m, m, x̃; t)` per slice (indexed `im·n_extra + e`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDensityGrid {
    pub grid: Arc<TriangularGrid>,
    pub values: Vec<Vec<f64>>,
    pub trace: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl JointDensityGrid {
    pub fn zeros(grid: Arc<TriangularGrid>, provenance: Provenance) -> Self {
        let k = grid.n_slices();
        let len = grid.slice_len();
        let tl = grid.n_m() * grid.n_extra();
        JointDensityGrid { values: vec![vec![0.0; len]; k], trace: vec![vec![0.0; tl]; k], grid, provenance }
    }

    /// Fills values from a closure `f(slice, m, x_full)`; inactive nodes are 0
    /// and the trace is read off the diagonal nodes.
    pub fn from_fn<F>(grid: Arc<TriangularGrid>, provenance: Provenance, f: F) -> Self
    where
        F: Fn(usize, f64, &[f64]) -> f64 + Sync + Send,
    {
        let g = grid.clone();
        let n_m = g.n_m();
        let n_x = g.n_x();
        let ne = g.n_extra();
        let d = g.d;
        let k = g.n_slices();
        let values: Vec<Vec<f64>> = (0..k)
            .map(|s| {
                let rows = crate::parallel::map_indexed(n_m, |im| {
                    let mut row = vec![0.0; n_x * ne];
                    let m = g.m_at(im);
                    let mut x = [0.0; MAX_DIM];
                    for ix in 0..n_x {
                        if !g.is_active(im, ix) {
                            continue;
                        }
                        x[0] = g.x_at(ix);
                        for e in 0..ne {
                            g.extra_point(e, &mut x[1..d]);
                            row[ix * ne + e] = f(s, m, &x[..d]);
                        }
                    }
                    row
                });
                rows.concat()
            })
            .collect();
        let mut out = JointDensityGrid { grid, values, trace: Vec::new(), provenance };
        out.trace_from_diagonal();
        out
    }

    /// Copies diagonal node values into the trace.
    pub fn trace_from_diagonal(&mut self) {
        let g = &self.grid;
        let ne = g.n_extra();
        self.trace = self
            .values
            .iter()
            .map(|vals| {
                let mut tr = vec![0.0; g.n_m() * ne];
                for im in 0..g.n_m() {
                    if let Some(ix) = g.diag_ix(im) {
                        for e in 0..ne {
                            tr[im * ne + e] = vals[g.idx(im, ix, e)];
                        }
                    }
                }
                tr
            })
            .collect();
    }

    #[inline]
    pub fn at(&self, slice: usize, im: usize, ix: usize, e: usize) -> f64 {
        self.values[slice][self.grid.idx(im, ix, e)]
    }

    /// Piecewise-linear interpolant in `(m, x¹)` for `d = 1`, on triangles
    /// whose edges run parallel to the diagonal; 0 outside the box or `𝒯`.
    pub fn interp1(&self, slice: usize, m: f64, x: f64) -> f64 {
        if m < x {
            return 0.0;
        }
        let g = &self.grid;
        let Some(tri) = crate::mc::p1_stencil(g, m, x) else { return 0.0 };
        let vals = &self.values[slice];
        tri.iter()
            .map(|&(a, b, w)| if w == 0.0 { 0.0 } else { w * vals[g.idx((a - g.m_lo) as usize, (b - g.x_lo) as usize, 0)] })
            .sum()
    }

    /// Trapezoid mass over the triangle for one slice.
    pub fn mass(&self, slice: usize) -> f64 {
        self.integrate(slice, |_, _, _| 1.0)
    }

    /// `∫_𝒯 g(m, x) p(m, x; t_slice)` by the triangular trapezoid rule.
    pub fn integrate<F: FnMut(f64, f64, &[f64]) -> f64>(&self, slice: usize, mut g: F) -> f64 {
        let gr = &self.grid;
        let ne = gr.n_extra();
        let d = gr.d;
        let vals = &self.values[slice];
        let mut x = [0.0; MAX_DIM];
        let mut acc = 0.0;
        for im in 0..gr.n_m() {
            let Some(end) = gr.row_end(im) else { continue };
            let m = gr.m_at(im);
            for ix in 0..=end {
                let w = gr.area_weight(im, ix);
                if w == 0.0 {
                    continue;
                }
                x[0] = gr.x_at(ix);
                for e in 0..ne {
                    let p = vals[gr.idx(im, ix, e)];
                    if p == 0.0 {
                        continue;
                    }
                    gr.extra_point(e, &mut x[1..d]);
                    acc += w * gr.extra_weight(e) * p * g(m, x[0], &x[1..d]);
                }
            }
        }
        acc
    }

    /// `∫ g(m, x̃) p(m, m, x̃; t)` along the diagonal using the stored trace.
    pub fn integrate_trace<F: FnMut(f64, &[f64]) -> f64>(&self, slice: usize, mut g: F) -> f64 {
        let gr = &self.grid;
        let ne = gr.n_extra();
        let d = gr.d;
        let tr = &self.trace[slice];
        let mut xt = [0.0; MAX_DIM];
        let mut acc = 0.0;
        for im in 0..gr.n_m() {
            let w = gr.diag_weight(im);
            if w == 0.0 {
                continue;
            }
            let m = gr.m_at(im);
            for e in 0..ne {
                let p = tr[im * ne + e];
                if p == 0.0 {
                    continue;
                }
                gr.extra_point(e, &mut xt[..d - 1]);
                acc += w * gr.extra_weight(e) * p * g(m, &xt[..d - 1]);
            }
        }
        acc
    }

    /// Restriction to a grid from [`TriangularGrid::coarsen_with`].
    pub fn restrict(&self, coarse: Arc<TriangularGrid>) -> Result<Self> {
        let fine = &self.grid;
        let f = (coarse.h / fine.h).round() as i64;
        let fu = f as usize;
        let mut out = JointDensityGrid::zeros(coarse.clone(), self.provenance);
        let ne_c = coarse.n_extra();
        let ne_f = fine.n_extra();
        let stride: Vec<usize> = fine.extra.iter().map(|a| a.n).collect();
        for (sc, tc) in coarse.times.iter().enumerate() {
            let Some(sf) = fine.slice_of(*tc) else {
                bail!(Validation, "coarse slice {tc} missing from fine grid")
            };
            for im in 0..coarse.n_m() {
                let lm = coarse.m_lo + im as i64;
                let imf = (f * lm - fine.m_lo) as usize;
                for ix in 0..coarse.n_x() {
                    let lx = coarse.x_lo + ix as i64;
                    let ixf = (f * lx - fine.x_lo) as usize;
                    for e in 0..ne_c {
                        // map extra index
                        let mut rem = e;
                        let mut ef = 0;
                        let mut mult = 1;
                        for (k, a) in coarse.extra.iter().enumerate().rev() {
                            let i = rem % a.n;
                            rem /= a.n;
                            ef += fu * i * mult;
                            mult *= stride[k];
                        }
                        out.values[sc][coarse.idx(im, ix, e)] = self.values[sf][fine.idx(imf, ixf, ef)];
                    }
                }
                for e in 0..ne_c {
                    let mut rem = e;
                    let mut ef = 0;
                    let mut mult = 1;
                    for (k, a) in coarse.extra.iter().enumerate().rev() {
                        let i = rem % a.n;
                        rem /= a.n;
                        ef += fu * i * mult;
                        mult *= stride[k];
                    }
                    out.trace[sc][im * ne_c + e] = self.trace[sf][imf * ne_f + ef];
                }
            }
        }
        Ok(out)
    }

    /// Pointwise `a·self + b·other` on the same grid.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.grid != other.grid {
            bail!(Validation, "densities live on different grids");
        }
        let mix = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            x.iter().zip(y).map(|(u, v)| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect()).collect()
        };
        Ok(JointDensityGrid {
            grid: self.grid.clone(),
            values: mix(&self.values, &other.values),
            trace: mix(&self.trace, &other.trace),
            provenance: self.provenance,
        })
    }
}

// ---------------------------------------------------------------------------
// Test functions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Bump,
    PolynomialTimesBump,
}

/// `∫_{-1}^{1} exp(-1/(1-u²)) du` inverted: the bump normalization.
pub fn bump_normalization() -> f64 {
    let r = Rule::gauss_legendre(20);
    let panels = 64;
    let mut acc = 0.0;
    for p in 0..panels {
        let a = -1.0 + 2.0 * p as f64 / panels as f64;
        let b = a + 2.0 / panels as f64;
        acc += r.integrate(a, b, |u| {
            let q = 1.0 - u * u;
            if q <= 0.0 {
                0.0
            } else {
                (-1.0 / q).exp()
            }
        });
    }
    1.0 / acc
}

/// The unit bump `χ(u) = a·exp(-1/(1-u²))` on `|u| < 1` with `∫χ = 1`,
/// and its first two derivatives.
#[inline]
pub fn chi(a: f64, u: f64) -> (f64, f64, f64) {
    let q = 1.0 - u * u;
    if q <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let v = a * (-1.0 / q).exp();
    let q2 = q * q;
    let d1 = v * (-2.0 * u / q2);
    let d2 = v * (4.0 * u * u / (q2 * q2) - 2.0 / q2 - 8.0 * u * u / (q2 * q));
    (v, d1, d2)
}

/// One-dimensional compactly supported profile
/// `y ↦ ((y-c)/r)^deg · χ((y-c)/r) / r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub kind: ProfileKind,
    pub center: f64,
    pub radius: f64,
    pub degree: u32,
    pub norm: f64,
}

impl Profile {
    pub fn new(kind: ProfileKind, center: f64, radius: f64, degree: u32) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() || !center.is_finite() {
            bail!(Domain, "profile radius must be positive and finite, center finite");
        }
        let degree = if kind == ProfileKind::Bump { 0 } else { degree };
        Ok(Profile { kind, center, radius, degree, norm: bump_normalization() })
    }

    /// Value, first and second derivative.
    #[inline]
    pub fn eval(&self, y: f64) -> (f64, f64, f64) {
        let u = (y - self.center) / self.radius;
        let (c0, c1, c2) = chi(self.norm, u);
        let r = self.radius;
        if self.degree == 0 {
            return (c0 / r, c1 / (r * r), c2 / (r * r * r));
        }
        let n = self.degree as i32;
        let p0 = u.powi(n);
        let p1 = n as f64 * u.powi(n - 1);
        let p2 = if n >= 2 { (n * (n - 1)) as f64 * u.powi(n - 2) } else { 0.0 };
        let v = p0 * c0;
        let v1 = p1 * c0 + p0 * c1;
        let v2 = p2 * c0 + 2.0 * p1 * c1 + p0 * c2;
        (v / r, v1 / (r * r), v2 / (r * r * r))
    }
    #[inline]
    pub fn value(&self, y: f64) -> f64 {
        self.eval(y).0
    }
    pub fn support(&self) -> (f64, f64) {
        (self.center - self.radius, self.center + self.radius)
    }
}

/// Separable test function `Φ(m, x) = H(m)·Π F_k(xᵏ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub id: String,
    pub h: Profile,
    pub f: Vec<Profile>,
}

/// Values of `Φ` and the derivatives the verifier needs at one point.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhiJet {
    pub value: f64,
    pub dm: f64,
    pub grad: [f64; MAX_DIM],
    pub lap: f64,
}

impl TestFunction {
    /// `H(m)` and `F(x)` use the same kind, center and radius in every coordinate.
    pub fn make(kind: ProfileKind, center: f64, radius: f64, degree: u32, d: usize) -> Result<Self> {
        let h = Profile::new(kind, center, radius, degree)?;
        let f = (0..d).map(|_| Profile::new(kind, center, radius, degree)).collect::<Result<Vec<_>>>()?;
        let id = alloc::format!("{:?}-c{center}-r{radius}-deg{}", kind, h.degree).to_lowercase();
        Ok(TestFunction { id, h, f })
    }

    pub fn with_centers(kind: ProfileKind, m_center: f64, x_center: &[f64], radius: f64, degree: u32) -> Result<Self> {
        let h = Profile::new(kind, m_center, radius, degree)?;
        let f = x_center.iter().map(|c| Profile::new(kind, *c, radius, degree)).collect::<Result<Vec<_>>>()?;
        let id = alloc::format!("{:?}-m{m_center}-x{:?}-r{radius}-deg{}", kind, x_center, h.degree).to_lowercase();
        Ok(TestFunction { id, h, f })
    }

    pub fn value(&self, m: f64, x: &[f64]) -> f64 {
        self.h.value(m) * self.f_value(x)
    }

    pub fn f_value(&self, x: &[f64]) -> f64 {
        self.f.iter().zip(x).map(|(p, v)| p.value(*v)).product()
    }

    /// Value, `∂_mΦ`, `∇ₓΦ` and `ΔₓΦ`.
    pub fn jet(&self, m: f64, x: &[f64]) -> PhiJet {
        let (h0, h1, _) = self.h.eval(m);
        let (f, grad_f, lap_f) = self.f_jet(x);
        let mut grad = [0.0; MAX_DIM];
        for k in 0..x.len() {
            grad[k] = h0 * grad_f[k];
        }
        PhiJet { value: h0 * f, dm: h1 * f, grad, lap: h0 * lap_f }
    }

    /// `F`, `∇F`, `ΔF`.
    pub fn f_jet(&self, x: &[f64]) -> (f64, [f64; MAX_DIM], f64) {
        let d = x.len();
        let mut e = [(0.0, 0.0, 0.0); MAX_DIM];
        for k in 0..d {
            e[k] = self.f[k].eval(x[k]);
        }
        let mut val = 1.0;
        for k in 0..d {
            val *= e[k].0;
        }
        let mut grad = [0.0; MAX_DIM];
        let mut lap = 0.0;
        for k in 0..d {
            let mut g = e[k].1;
            let mut l = e[k].2;
            for j in 0..d {
                if j != k {
                    g *= e[j].0;
                    l *= e[j].0;
                }
            }
            grad[k] = g;
            lap += l;
        }
        (val, grad, lap)
    }

    /// Generator `ℒΦ = B·∇ₓΦ + ½ΔₓΦ`.
    pub fn generator(&self, drift: &Drift, m: f64, x: &[f64]) -> f64 {
        let j = self.jet(m, x);
        let mut b = [0.0; MAX_DIM];
        drift.eval(x, &mut b[..x.len()]);
        let mut acc = 0.5 * j.lap;
        for k in 0..x.len() {
            acc += b[k] * j.grad[k];
        }
        acc
    }

    /// `ℒF` for the spatial factor alone.
    pub fn generator_f(&self, drift: &Drift, x: &[f64]) -> f64 {
        let (_, g, l) = self.f_jet(x);
        let mut b = [0.0; MAX_DIM];
        drift.eval(x, &mut b[..x.len()]);
        let mut acc = 0.5 * l;
        for k in 0..x.len() {
            acc += b[k] * g[k];
        }
        acc
    }

    /// Support box: `(m_lo, m_hi)` and per-coordinate `x` intervals.
    pub fn support(&self) -> ((f64, f64), Vec<(f64, f64)>) {
        (self.h.support(), self.f.iter().map(|p| p.support()).collect())
    }
}

/// The mollifier `χ_ε(m) = χ((m - x¹)/ε)/ε`.
pub fn mollifier(epsilon: f64, center: f64) -> Result<Profile> {
    Profile::new(ProfileKind::Bump, center, epsilon, 0)
}

//! Lookback and barrier quantities from a density grid or a simulated batch.
//!
//! Every estimate carries a one-sigma style error: the quadrature change
//! under spatial coarsening for densities, the standard error for Monte
//! Carlo. Two sources agree when their gap is within `k` combined errors.

use alloc::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
#[allow(unused_imports)]
use crate::fmath::*;
use crate::mc::{McEstimate, PathBatch};
use crate::model::{JointDensityGrid, ModelSpec};

/// Where a price comes from.
#[derive(Debug, Clone, Copy)]
pub enum PriceSource<'a> {
    Density(&'a JointDensityGrid),
    MonteCarlo(&'a PathBatch),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Density,
    MonteCarlo,
}

impl SourceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceKind::Density => "density",
            SourceKind::MonteCarlo => "monte_carlo",
        }
    }
}

/// A priced quantity with its error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceEstimate {
    pub value: f64,
    pub error: f64,
    pub source: SourceKind,
}

impl PriceEstimate {
    /// Widens the error by the change against a coarser solution of the
    /// same problem, so solver discretization is accounted for.
    pub fn with_refinement(mut self, coarse: &PriceEstimate) -> Self {
        self.error = self.error.max((self.value - coarse.value).abs());
        self
    }
}

/// Verdict of comparing two estimates of the same quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub a: PriceEstimate,
    pub b: PriceEstimate,
    pub gap: f64,
    pub combined_error: f64,
    pub k: f64,
    pub agree: bool,
}

/// `|a - b| ≤ k·sqrt(e_a² + e_b²)`.
pub fn cross_validate(a: PriceEstimate, b: PriceEstimate, k: f64) -> CrossValidation {
    let gap = (a.value - b.value).abs();
    let combined_error = (a.error * a.error + b.error * b.error).sqrt();
    CrossValidation { a, b, gap, combined_error, k, agree: gap <= k * combined_error }
}

fn density_slice(p: &JointDensityGrid, t: f64) -> Result<usize> {
    if p.grid.d != 1 {
        bail!(Unsupported, "density pricing is implemented for d = 1");
    }
    match p.grid.slice_of(t) {
        Some(s) => Ok(s),
        None => bail!(Domain, "density grid has no slice at t = {t}"),
    }
}

fn batch_snapshot(b: &PathBatch, t: f64) -> Result<usize> {
    match b.snapshot_of(t) {
        Some(s) => Ok(s),
        None => bail!(Domain, "path batch has no snapshot at t = {t}"),
    }
}

/// Trapezoid integral and its change when every other lattice line is dropped.
fn density_functional<F: Fn(f64, f64) -> f64 + Copy>(p: &JointDensityGrid, slice: usize, g: F) -> Result<(f64, f64)> {
    let fine = p.integrate(slice, |m, x, _| g(m, x));
    let error = match p.grid.coarsen_with(true, false) {
        Ok(cg) => {
            let coarse = p.restrict(Arc::new(cg))?;
            let cs = coarse.grid.slice_of(p.grid.times[slice]).unwrap_or(slice);
            (fine - coarse.integrate(cs, |m, x, _| g(m, x))).abs()
        }
        // too few lines to coarsen: fall back on the mass defect
        Err(_) => (1.0 - p.mass(slice)).abs(),
    };
    Ok((fine, error.max(1e-12)))
}

fn batch_functional<F: Fn(f64, f64) -> f64>(b: &PathBatch, snap: usize, g: F) -> McEstimate {
    let sups = &b.sups[snap];
    let states = &b.states[snap];
    match &b.weights {
        None => McEstimate::from_samples((0..b.n_paths).map(|i| g(sups[i], states[i * b.d]))),
        Some(w) => {
            // self-normalised weighted mean with the delta-method error
            let w = &w[snap];
            let total: f64 = w.iter().sum();
            let mean = (0..b.n_paths).map(|i| w[i] * g(sups[i], states[i * b.d])).sum::<f64>() / total;
            let var: f64 =
                (0..b.n_paths).map(|i| (w[i] / total).powi(2) * (g(sups[i], states[i * b.d]) - mean).powi(2)).sum();
            McEstimate { mean, std_err: var.sqrt(), n: b.n_paths }
        }
    }
}

/// `E[M_T - X¹_T]`, the undiscounted lookback put with floating strike.
pub fn lookback_put(model: &ModelSpec, t: f64, source: PriceSource<'_>) -> Result<PriceEstimate> {
    if !(t >= 0.0 && t.is_finite()) {
        bail!(Domain, "horizon must be finite and nonnegative, got {t}");
    }
    if t == 0.0 {
        return Ok(PriceEstimate { value: 0.0, error: 0.0, source: kind(&source) });
    }
    check_dimension(model, &source)?;
    match source {
        PriceSource::Density(p) => {
            let s = density_slice(p, t)?;
            let (value, error) = density_functional(p, s, |m, x| m - x)?;
            Ok(PriceEstimate { value, error, source: SourceKind::Density })
        }
        PriceSource::MonteCarlo(b) => {
            let e = batch_functional(b, batch_snapshot(b, t)?, |m, x| m - x);
            Ok(PriceEstimate { value: e.mean, error: e.std_err, source: SourceKind::MonteCarlo })
        }
    }
}

/// `P(M_T ≥ L)`.
pub fn barrier_touch_prob(model: &ModelSpec, t: f64, level: f64, source: PriceSource<'_>) -> Result<PriceEstimate> {
    let (lo, hi) = model.initial.first_coordinate_span();
    if !level.is_finite() && level > 0.0 {
        return Ok(PriceEstimate { value: 0.0, error: 0.0, source: kind(&source) });
    }
    if level.is_nan() || level < lo {
        bail!(Domain, "barrier {level} lies below the start support [{lo}, {hi}]");
    }
    if level <= lo {
        return Ok(PriceEstimate { value: 1.0, error: 0.0, source: kind(&source) });
    }
    check_dimension(model, &source)?;
    match source {
        PriceSource::Density(p) => {
            let s = density_slice(p, t)?;
            // the region m ≥ L is bounded by a lattice line only by accident, so
            // integrate the complement's smooth indicator through the cell rule
            let (below, error) = density_functional(p, s, |m, _| step_weight(m, level, p.grid.h))?;
            let mass = p.mass(s);
            let value = (mass - below).clamp(0.0, 1.0);
            Ok(PriceEstimate { value, error: error + (1.0 - mass).abs(), source: SourceKind::Density })
        }
        PriceSource::MonteCarlo(b) => {
            let e = batch_functional(b, batch_snapshot(b, t)?, |m, _| if m >= level { 1.0 } else { 0.0 });
            let err = if e.std_err > 0.0 { e.std_err } else { 1.0 / b.n_paths.max(1) as f64 };
            Ok(PriceEstimate { value: e.mean, error: err, source: SourceKind::MonteCarlo })
        }
    }
}

/// Weight of `1{m < L}` at a trapezoid node: the exact fraction of the
/// node's cell `[m - h/2, m + h/2]` lying below `L`.
fn step_weight(m: f64, level: f64, h: f64) -> f64 {
    ((level - (m - 0.5 * h)) / h).clamp(0.0, 1.0)
}

fn kind(source: &PriceSource<'_>) -> SourceKind {
    match source {
        PriceSource::Density(_) => SourceKind::Density,
        PriceSource::MonteCarlo(_) => SourceKind::MonteCarlo,
    }
}

fn check_dimension(model: &ModelSpec, source: &PriceSource<'_>) -> Result<()> {
    let d = match source {
        PriceSource::Density(p) => p.grid.d,
        PriceSource::MonteCarlo(b) => b.d,
    };
    if d != model.d {
        bail!(Validation, "source has dimension {d}, model has {}", model.d);
    }
    Ok(())
}

//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use runmax_core::mc::DensityMethod;
use runmax_core::model::{build_model, Drift, DriftSpec, Initial, InitialSpec, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, AppError, AppResult};

/// Which route produces the density.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceChoice {
    /// Closed form; needs zero or constant drift.
    Exact,
    Parametrix,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "one")]
    pub dimension: usize,
    pub drift: DriftSpec,
    pub initial: InitialSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub source: SourceChoice,
    pub horizon: f64,
    /// Lattice nodes per axis for `m` and `x¹`. An odd count puts the box
    /// center on the lattice.
    pub nodes: usize,
    /// Time slices, graded uniformly in `√t`.
    pub slices: usize,
    /// Half-width of the box; chosen from the drift bound when absent.
    #[serde(rename = "box")]
    pub box_half_width: Option<f64>,
    /// Nodes on each extra axis when the dimension exceeds one.
    pub extra_nodes: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub mc_method: DensityMethod,
}

impl Default for DensitySection {
    fn default() -> Self {
        DensitySection {
            source: SourceChoice::Exact,
            horizon: 1.0,
            nodes: 97,
            slices: 24,
            box_half_width: None,
            extra_nodes: 16,
            max_iter: 40,
            tol: 1e-8,
            mc_method: DensityMethod::KernelSmoothed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub paths: usize,
    pub steps: usize,
    pub bridge: bool,
    /// Also write the simulated batch in the flat binary format.
    pub save_paths: bool,
}

impl Default for McSection {
    fn default() -> Self {
        McSection { paths: 200_000, steps: 200, bridge: true, save_paths: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Multiplies every error estimate in the pass criteria.
    pub gate_scale: f64,
    /// Largest accepted `max|residual| / max scale` of the strong boundary
    /// condition.
    pub boundary_tol: f64,
    /// Treat refinement-unstable membership items as a gate breach.
    pub membership_gate: bool,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection { gate_scale: 1.0, boundary_tol: 0.05, membership_gate: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriceSection {
    pub horizons: Vec<f64>,
    pub barriers: Vec<f64>,
    /// Agreement gate in combined standard errors.
    pub sigmas: f64,
    /// Lattice nodes of the coarser solve whose change widens the density
    /// error; `0` picks two thirds of `density.nodes`, rounded up to odd.
    pub coarse_nodes: usize,
}

impl Default for PriceSection {
    fn default() -> Self {
        PriceSection { horizons: vec![1.0], barriers: Vec::new(), sigmas: 3.0, coarse_nodes: 0 }
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub id: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub density: DensitySection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub price: PriceSection,
}

fn one() -> usize {
    1
}

/// A parsed configuration with the hash of its source bytes.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub sha256: String,
    pub config: RunConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> AppResult<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| AppError::Config { path: path.to_path_buf(), message: e.to_string() })?;
        cfg.check(path)?;
        Ok(cfg)
    }

    fn check(&self, path: &Path) -> AppResult<()> {
        let bad = |message: String| Err(AppError::Config { path: path.to_path_buf(), message });
        let d = &self.density;
        if !(d.horizon > 0.0 && d.horizon.is_finite()) {
            return bad(format!("density.horizon must be positive, got {}", d.horizon));
        }
        if d.nodes < 9 || d.slices < 2 {
            return bad("density.nodes must be at least 9 and density.slices at least 2".into());
        }
        if self.mc.paths == 0 || self.mc.steps == 0 {
            return bad("mc.paths and mc.steps must be positive".into());
        }
        if !(self.verify.gate_scale > 0.0) {
            return bad("verify.gate_scale must be positive".into());
        }
        if self.price.horizons.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return bad("price.horizons must be positive".into());
        }
        Ok(())
    }

    pub fn build_model(&self) -> AppResult<ModelSpec> {
        Ok(build_model(
            Drift::Known(self.model.drift.clone()),
            Initial::Known(self.model.initial.clone()),
            self.model.dimension,
        )?)
    }
}

/// Reads and hashes a configuration file.
pub fn load(path: &Path) -> AppResult<LoadedConfig> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let sha256 = hex(&Sha256::digest(&bytes));
    let text = String::from_utf8(bytes)
        .map_err(|e| AppError::Config { path: path.to_path_buf(), message: format!("not UTF-8: {e}") })?;
    Ok(LoadedConfig { path: path.to_path_buf(), sha256, config: RunConfig::from_toml(&text, path)? })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let text = r#"
            id = "zero"
            [model]
            drift = { kind = "zero" }
            initial = { kind = "gaussian", mean = [0.0], width = 0.001 }
        "#;
        let cfg = RunConfig::from_toml(text, Path::new("inline.toml")).unwrap();
        assert_eq!(cfg.density.source, SourceChoice::Exact);
        assert_eq!(cfg.model.dimension, 1);
        assert_eq!(cfg.verify.gate_scale, 1.0);
        cfg.build_model().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let base = "id = \"x\"\n[model]\ndrift = { kind = \"zero\" }\ninitial = { kind = \"gaussian\", mean = [0.0], width = 0.001 }\n";
        assert!(RunConfig::from_toml(&format!("{base}[density]\nnodez = 3\n"), Path::new("a")).is_err());
        assert!(RunConfig::from_toml(&format!("{base}[density]\nhorizon = -1.0\n"), Path::new("a")).is_err());
    }
}

//! Benchmark configuration: a nested, human-readable document with every
//! constant of a run, plus dotted-key overrides.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{FeatureLibrary, MaterialParams};
use crate::euclid::EuclidSettings;
use crate::mesh::SensorLayout;
use crate::pce::PceSettings;
use crate::solver::SolverSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub width: f64,
    pub height: f64,
    pub hole_radius: f64,
    pub refinement: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { width: 1.0, height: 1.0, hole_radius: 0.25, refinement: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LibraryConfig {
    pub n_mr: usize,
    pub n_vol: usize,
}

impl Default for LibraryConfig {
    fn default() -> Self {
        LibraryConfig { n_mr: 3, n_vol: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Named preset; ignored when `positions` is given.
    pub preset: String,
    pub positions: Option<Vec<[f64; 2]>>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig { preset: "dense38".into(), positions: None }
    }
}

impl SensorConfig {
    pub fn layout(&self) -> SensorLayout {
        match &self.positions {
            Some(p) => SensorLayout::Explicit(p.clone()),
            None => SensorLayout::Preset(self.preset.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Measurement noise standard deviation (mm).
    pub sigma_e: f64,
    /// Readings per sensor.
    pub n_r: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma_e: 1e-4, n_r: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadConfig {
    /// Right-edge traction magnitude in x (MPa).
    pub t_max: f64,
    pub eta: f64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig { t_max: 0.5, eta: 1.0 }
    }
}

/// Linear elastic model used as the first forecast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { youngs_modulus: 1.35, poisson_ratio: 0.35 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialModel {
    LinearElastic,
    Truth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorForm {
    Precision,
    Gain,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub max_iterations: usize,
    /// Explicit convergence threshold on RMSE_u (mm); derived from the noise level when absent.
    pub tol: Option<f64>,
    pub tol_factor: f64,
    /// Widen the derived threshold by `1 + 2/√n_gsen` for the sampling spread of the residual.
    pub tol_sensor_scaling: bool,
    /// Lower bound of the derived threshold (mm).
    pub tol_floor: f64,
    /// Lower bound of the assimilation noise level, which must be positive (mm).
    pub noise_floor: f64,
    pub initial_model: InitialModel,
    /// Forecast and assimilate once with the initial model, no discovery.
    pub assimilate_only: bool,
    pub posterior_form: PosteriorForm,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            max_iterations: 10,
            tol: None,
            tol_factor: 1.05,
            tol_sensor_scaling: true,
            tol_floor: 1e-8,
            noise_floor: 1e-7,
            initial_model: InitialModel::LinearElastic,
            assimilate_only: false,
            posterior_form: PosteriorForm::Precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Fewer sensors than this cannot be meshed meaningfully.
    pub min_sensors: usize,
    pub volumetric_constraint: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { min_sensors: 10, volumetric_constraint: false }
    }
}

/// Everything a benchmark run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub name: String,
    pub seed: u64,
    /// Ground-truth coefficients by feature name.
    pub truth: BTreeMap<String, f64>,
    pub geometry: GeometryConfig,
    pub library: LibraryConfig,
    pub load: LoadConfig,
    pub sensors: SensorConfig,
    pub noise: NoiseConfig,
    pub solver: SolverSettings,
    pub pce: PceSettings,
    pub euclid: EuclidSettings,
    pub prior: PriorConfig,
    #[serde(rename = "loop")]
    pub loop_: LoopConfig,
    pub baseline: BaselineConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            name: "neo_hookean".into(),
            seed: 42,
            truth: BTreeMap::from([("A10".to_string(), 0.5), ("B1".to_string(), 1.5)]),
            geometry: GeometryConfig::default(),
            library: LibraryConfig::default(),
            load: LoadConfig::default(),
            sensors: SensorConfig::default(),
            noise: NoiseConfig::default(),
            solver: SolverSettings::default(),
            pce: PceSettings::default(),
            euclid: EuclidSettings::default(),
            prior: PriorConfig::default(),
            loop_: LoopConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses, applies `key=value` overrides by dotted path, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn feature_library(&self) -> Result<FeatureLibrary, ConfigError> {
        FeatureLibrary::new(self.library.n_mr, self.library.n_vol).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn truth_params(&self) -> Result<MaterialParams, ConfigError> {
        let lib = self.feature_library()?;
        let pairs: Vec<(&str, f64)> = self.truth.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        MaterialParams::from_named(lib, &pairs).map_err(|e| ConfigError::Invalid(format!("truth: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let g = &self.geometry;
        if !(g.width > 0.0 && g.height > 0.0) || !(g.hole_radius > 0.0 && 2.0 * g.hole_radius < g.width.min(g.height)) {
            return bad(format!("geometry {g:?}: need 0 < hole_radius < min(width, height)/2"));
        }
        if g.refinement == 0 {
            return bad("geometry.refinement must be >= 1".into());
        }
        self.truth_params()?;
        if !(self.load.t_max.is_finite() && self.load.eta > 0.0 && self.load.eta <= 1.0) {
            return bad(format!("load {:?}: need finite t_max and 0 < eta <= 1", self.load));
        }
        if !(self.noise.sigma_e >= 0.0) || self.noise.n_r == 0 {
            return bad(format!("noise {:?}: need sigma_e >= 0 and n_r >= 1", self.noise));
        }
        let p = &self.prior;
        if !(p.youngs_modulus > 0.0) || !(p.poisson_ratio > -1.0 && p.poisson_ratio < 0.5) {
            return bad(format!("prior: need E > 0 and -1 < nu < 0.5, got E = {}, nu = {}", p.youngs_modulus, p.poisson_ratio));
        }
        let s = &self.solver;
        if !(s.newton_tol > 0.0) || s.max_iters == 0 || s.n_load_steps == 0 {
            return bad(format!("solver {s:?}"));
        }
        let pc = &self.pce;
        if pc.n_samples < pc.order + 1 || !(pc.sigma_t_ratio >= 0.0) {
            return bad(format!("pce {pc:?}: need n_samples > order and sigma_t_ratio >= 0"));
        }
        self.euclid.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let l = &self.loop_;
        if l.max_iterations == 0 || !(l.tol_factor > 0.0) || !(l.noise_floor > 0.0) || !(l.tol_floor >= 0.0) {
            return bad(format!("loop {l:?}"));
        }
        if let Some(t) = l.tol {
            if !(t > 0.0) {
                return bad(format!("loop.tol = {t} must be positive"));
            }
        }
        Ok(())
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.into()));
    }
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap();
    let mut table = doc;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{spec}: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

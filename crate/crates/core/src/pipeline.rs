//! Synthetic benchmarks: data generation, the EUCLID-only baseline on a
//! sensor-spanned mesh, and the iterative assimilate-then-discover loop.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{BenchmarkConfig, ConfigError, InitialModel, PosteriorForm};
use crate::constitutive::MaterialParams;
use crate::euclid::{self, DiscoveredModel, EuclidError, EuclidSettings};
use crate::mesh::{self, Mesh, MeshError, SensorSet};
use crate::metrics::{self, EnergyError, InvariantRanges, MetricsError};
use crate::pce::{self, PCExpansion, PceError, TractionRandomField};
use crate::solver::{self, LoadCase, Material, SolverError};
use crate::statfem::{self, GaussianField, ObservationSet, StatFemError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Pce(#[from] PceError),
    #[error(transparent)]
    StatFem(#[from] StatFemError),
    #[error(transparent)]
    Euclid(#[from] EuclidError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedStream {
    Noise = 1,
    PceSampling = 2,
}

/// `splitmix64(master ⊕ (stream · 0x9E3779B97F4A7C15))`
pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    let mut z = master ^ (stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mesh, sensors, truth and load of a configured benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub mesh: Mesh,
    pub sensors: SensorSet,
    pub truth: MaterialParams,
    pub load: LoadCase,
}

impl Benchmark {
    pub fn new(config: &BenchmarkConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let g = &config.geometry;
        let mesh = mesh::build_plate_with_hole(g.width, g.height, g.hole_radius, g.refinement)?;
        let sensors = mesh::place_sensors(&mesh, &config.sensors.layout())?;
        Ok(Benchmark {
            truth: config.truth_params()?,
            load: LoadCase::uniaxial(config.load.t_max, config.load.eta),
            config: config.clone(),
            mesh,
            sensors,
        })
    }

    pub fn prior_material(&self) -> Material {
        Material::LinearElastic {
            youngs_modulus: self.config.prior.youngs_modulus,
            poisson_ratio: self.config.prior.poisson_ratio,
        }
    }
}

/// Ground-truth field and noisy sensor readings.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub u_true: DVector<f64>,
    /// `n_r` readings, each sensor-major `[s0x, s0y, s1x, ...]`.
    pub y: Vec<DVector<f64>>,
    pub sigma_e: f64,
}

impl SyntheticData {
    pub fn mean_reading(&self) -> DVector<f64> {
        let n = self.y[0].len();
        self.y.iter().fold(DVector::zeros(n), |a, r| a + r) / self.y.len() as f64
    }
}

/// `y = H u_true + e`, `e ~ N(0, σ_e² I)`, noise drawn from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn generate_synthetic_data(
    truth: &MaterialParams,
    mesh: &Mesh,
    sensors: &SensorSet,
    load: &LoadCase,
    solver_settings: &solver::SolverSettings,
    sigma_e: f64,
    n_r: usize,
    seed: u64,
) -> Result<SyntheticData, PipelineError> {
    let u_true = pce::robust_solve(mesh, &truth.clone().into(), load, solver_settings)?;
    let clean = DVector::from_iterator(sensors.n_gsen(), sensors.observed_dofs().iter().map(|&d| u_true[d]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = (0..n_r.max(1))
        .map(|_| {
            if sigma_e > 0.0 {
                let normal = Normal::new(0.0, sigma_e).expect("positive standard deviation");
                clean.map(|v| v + normal.sample(&mut rng))
            } else {
                clean.clone()
            }
        })
        .collect();
    Ok(SyntheticData { u_true, y, sigma_e })
}

/// Synthetic data of a configured benchmark with the noise stream of its seed.
pub fn benchmark_data(bench: &Benchmark) -> Result<SyntheticData, PipelineError> {
    let c = &bench.config;
    generate_synthetic_data(
        &bench.truth,
        &bench.mesh,
        &bench.sensors,
        &bench.load,
        &c.solver,
        c.noise.sigma_e,
        c.noise.n_r,
        derive_seed(c.seed, SeedStream::Noise),
    )
}

/// Result of the EUCLID-only baseline; the non-discovery variants mirror empty table cells.
#[derive(Debug, Clone)]
pub enum BaselineOutcome {
    Discovered(DiscoveredModel),
    InsufficientSensors { n_sen: usize, min_sensors: usize },
    NotIdentifiable { best_rmse: f64, tau: f64 },
}

impl BaselineOutcome {
    pub fn model(&self) -> Option<&DiscoveredModel> {
        match self {
            BaselineOutcome::Discovered(m) => Some(m),
            _ => None,
        }
    }
}

/// EUCLID applied directly to the sensor readings on a mesh spanned by the sensors.
///
/// Each sensor becomes a node carrying its mean reading; two zero-displacement
/// anchors on the clamped corners close the mesh.
pub fn run_euclid_baseline(
    data: &SyntheticData,
    sensors: &SensorSet,
    mesh: &Mesh,
    config: &BenchmarkConfig,
) -> Result<BaselineOutcome, PipelineError> {
    let n_sen = sensors.n_sen();
    let min_sensors = config.baseline.min_sensors;
    if n_sen < min_sensors {
        return Ok(BaselineOutcome::InsufficientSensors { n_sen, min_sensors });
    }
    let points = sensors.host_coordinates(mesh);
    let sm = match mesh::build_sensor_mesh(&points, mesh.width, mesh.height, mesh.hole) {
        Ok(sm) => sm,
        Err(MeshError::Triangulation(_) | MeshError::DegenerateElement { .. }) => {
            return Ok(BaselineOutcome::InsufficientSensors { n_sen, min_sensors });
        }
        Err(e) => return Err(e.into()),
    };
    let y = data.mean_reading();
    let mut u = DVector::zeros(sm.mesh.n_gdof());
    for (s, &node) in sm.sensor_nodes.iter().enumerate() {
        u[2 * node] = y[2 * s];
        u[2 * node + 1] = y[2 * s + 1];
    }
    let lib = config.feature_library()?;
    let fm = euclid::assemble_feature_matrix(&sm.mesh, &u, &lib)?;
    let load = LoadCase::uniaxial(config.load.t_max, config.load.eta);
    let problem = fm.regression_problem(&solver::external_force(&sm.mesh, &load));
    let settings = EuclidSettings { volumetric_constraint: config.baseline.volumetric_constraint, ..config.euclid };
    match euclid::discover(&problem, &settings) {
        Ok(m) => Ok(BaselineOutcome::Discovered(m)),
        Err(EuclidError::NoAdmissibleModel { best_rmse, tau }) => Ok(BaselineOutcome::NotIdentifiable { best_rmse, tau }),
        Err(e) => Err(e.into()),
    }
}

/// One pass of forecast, assimilation and (unless converged) discovery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Model used for the forecast of this iteration.
    pub forecast_model: Material,
    /// RMSE between assimilated sensor values and data (mm).
    pub rmse_u: f64,
    /// Model held after this iteration.
    pub kappa: Option<MaterialParams>,
    pub eps_w: Option<f64>,
    pub eps_u: Option<f64>,
    /// Set when the discovery step produced no admissible model.
    pub discovery_failure: Option<String>,
    #[serde(skip)]
    pub discovered: Option<DiscoveredModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryHistory {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    /// Threshold the RMSE was compared against (mm).
    pub tol: f64,
}

/// Full output of an assimilate-then-discover run.
#[derive(Debug, Clone)]
pub struct LoopResult {
    /// Final library model, absent if no discovery ever succeeded.
    pub model: Option<MaterialParams>,
    /// Last successful discovery with its λ-path.
    pub discovered: Option<DiscoveredModel>,
    pub history: DiscoveryHistory,
    pub forecast: GaussianField,
    pub posterior: GaussianField,
    pub expansion: PCExpansion,
    pub data: SyntheticData,
    pub ranges: InvariantRanges,
    pub eps_w: Option<EnergyError>,
    pub eps_u: Option<f64>,
    /// Forward solution of the final model.
    pub u_disc: Option<DVector<f64>>,
}

/// Convergence threshold on RMSE_u.
pub fn convergence_tol(config: &BenchmarkConfig, n_gsen: usize) -> f64 {
    let l = &config.loop_;
    if let Some(t) = l.tol {
        return t;
    }
    let scaling = if l.tol_sensor_scaling { 1.0 + 2.0 / (n_gsen as f64).sqrt() } else { 1.0 };
    (l.tol_factor * std::f64::consts::SQRT_2 * config.noise.sigma_e * scaling).max(l.tol_floor)
}

/// Grid resolution of the energy error.
pub const ENERGY_GRID: usize = 100;

fn assimilate(prior: &GaussianField, obs: &ObservationSet, form: PosteriorForm) -> Result<GaussianField, StatFemError> {
    match form {
        PosteriorForm::Precision => statfem::posterior_update(prior, obs),
        PosteriorForm::Gain => statfem::posterior_update_gain(prior, obs),
    }
}

/// Runs the loop on freshly generated benchmark data.
pub fn run_statfem_euclid(config: &BenchmarkConfig) -> Result<LoopResult, PipelineError> {
    let bench = Benchmark::new(config)?;
    let data = benchmark_data(&bench)?;
    run_statfem_euclid_with(&bench, data)
}

/// Forecast with the current model, assimilate the data, stop if the
/// assimilated state matches the data, otherwise rediscover the model from
/// the posterior mean on the full mesh.
pub fn run_statfem_euclid_with(bench: &Benchmark, data: SyntheticData) -> Result<LoopResult, PipelineError> {
    let c = &bench.config;
    let mesh = &bench.mesh;
    let dofs = bench.sensors.observed_dofs();
    let n_sen = bench.sensors.n_sen();
    let sigma_assim = c.noise.sigma_e.max(c.loop_.noise_floor);
    let obs = ObservationSet::new(dofs.clone(), mesh.n_gdof(), data.y.clone(), sigma_assim)?;
    let y_mean = obs.mean_reading();
    let tol = convergence_tol(c, dofs.len());
    let ranges = metrics::invariant_ranges(mesh, &data.u_true)?;
    let field = TractionRandomField {
        mu_t: bench.load.traction.map(|t| t * bench.load.eta),
        sigma_t: [c.pce.sigma_t_ratio * bench.load.traction[0] * bench.load.eta, 0.0],
    };
    let f_ext = solver::external_force(mesh, &bench.load);
    let lib = c.feature_library()?;
    let pce_seed = derive_seed(c.seed, SeedStream::PceSampling);

    let mut model: Material = match c.loop_.initial_model {
        InitialModel::LinearElastic => bench.prior_material(),
        InitialModel::Truth => bench.truth.clone().into(),
    };
    let mut discovered: Option<DiscoveredModel> = None;
    let mut records = Vec::new();
    let mut converged = false;
    let mut last = None;
    for iteration in 1..=c.loop_.max_iterations {
        let (expansion, _) = pce::build_forecast(mesh, &model, &field, &c.pce, &c.solver, pce_seed)?;
        let forecast = pce::pce_moments(&expansion);
        let posterior = assimilate(&forecast, &obs, c.loop_.posterior_form)?;
        let mu_z = statfem::predict_at_sensors(&posterior, &dofs).mean;
        let rmse_u = statfem::rmse_sensors(&mu_z, &y_mean, n_sen)?;
        let mut record = IterationRecord {
            iteration,
            forecast_model: model.clone(),
            rmse_u,
            kappa: model.params().cloned(),
            eps_w: None,
            eps_u: None,
            discovery_failure: None,
            discovered: None,
        };
        let is_library_model = !model.is_linear();
        let stop = c.loop_.assimilate_only || (is_library_model && rmse_u < tol);
        if !stop {
            let fm = euclid::assemble_feature_matrix(mesh, &posterior.mean, &lib)?;
            match euclid::discover(&fm.regression_problem(&f_ext), &c.euclid) {
                Ok(d) => {
                    model = d.kappa_star.clone().into();
                    record.kappa = Some(d.kappa_star.clone());
                    record.discovered = Some(d.clone());
                    discovered = Some(d);
                }
                Err(EuclidError::NoAdmissibleModel { best_rmse, tau }) => {
                    record.discovery_failure = Some(format!("no admissible model (best RMSE {best_rmse:.3} vs tau {tau})"));
                }
                Err(e) => return Err(e.into()),
            }
        }
        if let Some(k) = &record.kappa {
            record.eps_w = Some(metrics::error_eps_w(&bench.truth, k, &ranges, ENERGY_GRID)?.value);
            record.eps_u = pce::robust_solve(mesh, &k.clone().into(), &bench.load, &c.solver)
                .ok()
                .map(|u| metrics::error_eps_u(&u, &data.u_true))
                .transpose()?;
        }
        records.push(record);
        last = Some((expansion, forecast, posterior));
        if stop {
            converged = !c.loop_.assimilate_only;
            break;
        }
    }
    let (expansion, forecast, posterior) = last.expect("at least one iteration");
    let final_model = model.params().cloned();
    let (eps_w, eps_u, u_disc) = match &final_model {
        Some(k) => {
            let e_w = metrics::error_eps_w(&bench.truth, k, &ranges, ENERGY_GRID)?;
            let u = pce::robust_solve(mesh, &k.clone().into(), &bench.load, &c.solver).ok();
            let e_u = u.as_ref().map(|u| metrics::error_eps_u(u, &data.u_true)).transpose()?;
            (Some(e_w), e_u, u)
        }
        None => (None, None, None),
    };
    Ok(LoopResult {
        model: final_model,
        discovered,
        history: DiscoveryHistory { records, converged, tol },
        forecast,
        posterior,
        expansion,
        data,
        ranges,
        eps_w,
        eps_u,
        u_disc,
    })
}

/// ε_W and ε_u of a discovered model against a benchmark truth.
pub fn model_metrics(
    bench: &Benchmark,
    data: &SyntheticData,
    model: &MaterialParams,
) -> Result<(EnergyError, Option<f64>), PipelineError> {
    let ranges = metrics::invariant_ranges(&bench.mesh, &data.u_true)?;
    let e_w = metrics::error_eps_w(&bench.truth, model, &ranges, ENERGY_GRID)?;
    let e_u = pce::robust_solve(&bench.mesh, &model.clone().into(), &bench.load, &bench.config.solver)
        .ok()
        .map(|u| metrics::error_eps_u(&u, &data.u_true))
        .transpose()?;
    Ok((e_w, e_u))
}

/// One cell of a benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub truth: String,
    pub method: String,
    pub n_sen: usize,
    pub sigma_e: f64,
    /// Discovered expression, or `--` when no model was identified.
    pub model: String,
    pub eps_w: Option<f64>,
    pub eps_u: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
}

/// Runs both methods on `config` with the given overrides of preset and noise.
pub fn suite_rows(config: &BenchmarkConfig, preset: &str, sigma_e: f64) -> Result<Vec<SuiteRow>, PipelineError> {
    let mut cfg = config.clone();
    cfg.sensors.preset = preset.to_string();
    cfg.sensors.positions = None;
    cfg.noise.sigma_e = sigma_e;
    let bench = Benchmark::new(&cfg)?;
    let data = benchmark_data(&bench)?;
    let n_sen = bench.sensors.n_sen();
    let row = |method: &str| SuiteRow {
        truth: cfg.name.clone(),
        method: method.into(),
        n_sen,
        sigma_e,
        model: "--".into(),
        eps_w: None,
        eps_u: None,
        iterations: None,
        converged: None,
    };
    let mut base = row("euclid");
    if let BaselineOutcome::Discovered(m) = run_euclid_baseline(&data, &bench.sensors, &bench.mesh, &cfg)? {
        let (e_w, e_u) = model_metrics(&bench, &data, &m.kappa_star)?;
        base.model = m.expression();
        base.eps_w = Some(e_w.value);
        base.eps_u = e_u;
    }
    let mut sfe = row("statfem-euclid");
    let result = run_statfem_euclid_with(&bench, data)?;
    sfe.iterations = Some(result.history.records.len());
    sfe.converged = Some(result.history.converged);
    if let Some(m) = &result.model {
        sfe.model = euclid::format_energy(m);
        sfe.eps_w = result.eps_w.map(|e| e.value);
        sfe.eps_u = result.eps_u;
    }
    Ok(vec![base, sfe])
}

/// Named coefficients, for reporting.
pub fn named_coefficients(params: &MaterialParams) -> BTreeMap<String, f64> {
    params.named().into_iter().collect()
}

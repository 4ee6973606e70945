use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use statfem_euclid::config::ConfigError;
use statfem_euclid::euclid::{self, DiscoveredModel};
use statfem_euclid::io;
use statfem_euclid::metrics;
use statfem_euclid::pipeline::{self, BaselineOutcome, Benchmark, PipelineError, SuiteRow};
use statfem_euclid::solver::{self, Material};
use statfem_euclid::{BenchmarkConfig, MaterialParams};

#[derive(Parser)]
#[command(name = "sfe", version, about = "Hyperelastic model discovery from sparse displacement data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Benchmark configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; created if missing.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel kernels.
    #[arg(long)]
    jobs: Option<usize>,
    /// Dotted `key=value` override, e.g. `--set noise.sigma_e=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Forward solve; writes displacement and von Mises fields.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = ForwardMaterial::Truth)]
        material: ForwardMaterial,
    },
    /// Synthetic noisy sensor readings from the truth model.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Discovers a model from synthetic data.
    Discover {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::StatfemEuclid)]
        mode: Mode,
    },
    /// Both methods over a grid of sensor presets and noise levels.
    BenchmarkSuite {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = ["sparse3".to_string(), "medium13".into(), "dense38".into()])]
        presets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_values_t = [1e-3, 1e-4])]
        sigmas: Vec<f64>,
    },
    /// Error metrics of a saved model against the configured truth.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// A `discovered_model.json` from a previous run.
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ForwardMaterial {
    Truth,
    Prior,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Euclid,
    StatfemEuclid,
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Numerical(anyhow::Error),
    NoModel(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::NoModel(_) => 4,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => Failure::Config(c.into()),
            e => Failure::Numerical(e.into()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.into())
    }
}

impl From<io::IoError> for Failure {
    fn from(e: io::IoError) -> Self {
        Failure::Numerical(e.into())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Numerical(e.into())
}

/// The serialized form of a discovered or saved model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    expression: String,
    coefficients: BTreeMap<String, f64>,
    #[serde(default)]
    active_set: Vec<String>,
    #[serde(default)]
    lambda_star: Option<f64>,
    #[serde(default)]
    rmse_star: Option<f64>,
}

impl ModelFile {
    fn from_params(p: &MaterialParams) -> Self {
        let names = p.library.names();
        ModelFile {
            expression: euclid::format_energy(p),
            coefficients: pipeline::named_coefficients(p),
            active_set: (0..p.kappa.len()).filter(|&i| p.kappa[i] > 0.0).map(|i| names[i].clone()).collect(),
            lambda_star: None,
            rmse_star: None,
        }
    }

    fn from_discovered(d: &DiscoveredModel) -> Self {
        ModelFile { lambda_star: Some(d.lambda_star), rmse_star: Some(d.rmse_star), ..Self::from_params(&d.kappa_star) }
    }
}

#[derive(Debug, Serialize)]
struct MetricsFile {
    method: String,
    n_sen: usize,
    sigma_e: f64,
    expression: Option<String>,
    eps_w: Option<f64>,
    eps_w_excluded_fraction: Option<f64>,
    eps_u: Option<f64>,
    iterations: Option<usize>,
    converged: Option<bool>,
    tol: Option<f64>,
    outcome: String,
}

struct Run {
    config: BenchmarkConfig,
    out: PathBuf,
}

fn prepare(common: &Common) -> Result<Run> {
    let text = fs::read_to_string(&common.config)
        .with_context(|| format!("cannot read config {}", common.config.display()))
        .map_err(Failure::Config)?;
    let mut config = BenchmarkConfig::from_toml_with_overrides(&text, &common.overrides)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Failure::Config(anyhow!("--jobs must be positive")));
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create {}", common.out.display()))
        .map_err(io_err)?;
    fs::write(common.out.join("config.toml"), config.to_toml()).map_err(io_err)?;
    Ok(Run { config, out: common.out.clone() })
}

fn write_sensors(out: &Path, bench: &Benchmark) -> Result<()> {
    io::write_json(&out.join("sensors.json"), &io::sensor_records(&bench.mesh, &bench.sensors))?;
    Ok(())
}

fn cmd_forward(common: &Common, which: ForwardMaterial) -> Result<()> {
    let run = prepare(common)?;
    let bench = Benchmark::new(&run.config)?;
    let material: Material = match which {
        ForwardMaterial::Truth => bench.truth.clone().into(),
        ForwardMaterial::Prior => bench.prior_material(),
    };
    let (field, report) = solver::solve_forward_report(&bench.mesh, &material, &bench.load, &run.config.solver)
        .map_err(|e| Failure::Numerical(e.into()))?;
    io::write_displacement_csv(&run.out.join("displacement.csv"), &bench.mesh, &field.u)?;
    let vm = metrics::nodal_von_mises(&bench.mesh, &field.u, &material).map_err(io_err)?;
    io::write_nodal_csv(&run.out.join("von_mises.csv"), &bench.mesh, &[("von_mises", &vm)])?;
    io::write_json(&run.out.join("solve_report.json"), &report)?;
    println!(
        "forward: {} nodes, {} elements, max |u| = {:.6e} mm, final residual {:.3e}",
        bench.mesh.n_dof(),
        bench.mesh.elements.len(),
        field.u.amax(),
        report.final_residual
    );
    Ok(())
}

fn cmd_generate_data(common: &Common) -> Result<()> {
    let run = prepare(common)?;
    let bench = Benchmark::new(&run.config)?;
    let data = pipeline::benchmark_data(&bench)?;
    io::write_observations_csv(&run.out.join("y.csv"), &bench.mesh, &bench.sensors, &data.y)?;
    io::write_displacement_csv(&run.out.join("u_true.csv"), &bench.mesh, &data.u_true)?;
    write_sensors(&run.out, &bench)?;
    println!(
        "generate-data: {} sensors, {} readings each, sigma_e = {}",
        bench.sensors.n_sen(),
        data.y.len(),
        data.sigma_e
    );
    Ok(())
}

fn print_row(m: &MetricsFile) {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3e}")).unwrap_or_else(|| "--".into());
    println!("| method | n_sen | sigma_e | model | eps_W | eps_u |");
    println!(
        "| {} | {} | {:e} | {} | {} | {} |",
        m.method,
        m.n_sen,
        m.sigma_e,
        m.expression.as_deref().unwrap_or("--"),
        f(m.eps_w),
        f(m.eps_u)
    );
}

fn cmd_discover(common: &Common, mode: Mode) -> Result<()> {
    let run = prepare(common)?;
    let bench = Benchmark::new(&run.config)?;
    let data = pipeline::benchmark_data(&bench)?;
    let out = &run.out;
    io::write_observations_csv(&out.join("y.csv"), &bench.mesh, &bench.sensors, &data.y)?;
    write_sensors(out, &bench)?;
    let lib = run.config.feature_library()?;
    let mut m = MetricsFile {
        method: if mode == Mode::Euclid { "euclid" } else { "statfem-euclid" }.into(),
        n_sen: bench.sensors.n_sen(),
        sigma_e: data.sigma_e,
        expression: None,
        eps_w: None,
        eps_w_excluded_fraction: None,
        eps_u: None,
        iterations: None,
        converged: None,
        tol: None,
        outcome: String::new(),
    };
    let failure = match mode {
        Mode::Euclid => {
            let outcome = pipeline::run_euclid_baseline(&data, &bench.sensors, &bench.mesh, &run.config)?;
            match outcome {
                BaselineOutcome::Discovered(d) => {
                    let (e_w, e_u) = pipeline::model_metrics(&bench, &data, &d.kappa_star)?;
                    io::write_pareto_csv(&out.join("pareto.csv"), &d.pareto_path, &lib)?;
                    io::write_json(&out.join("discovered_model.json"), &ModelFile::from_discovered(&d))?;
                    m.expression = Some(d.expression());
                    m.eps_w = Some(e_w.value);
                    m.eps_w_excluded_fraction = Some(e_w.excluded_fraction());
                    m.eps_u = e_u;
                    m.outcome = "discovered".into();
                    None
                }
                BaselineOutcome::InsufficientSensors { n_sen, min_sensors } => {
                    m.outcome = "insufficient sensors".into();
                    Some(format!("insufficient sensors: {n_sen} < {min_sensors}; add sensors to identify a model"))
                }
                BaselineOutcome::NotIdentifiable { best_rmse, tau } => {
                    m.outcome = "no admissible model".into();
                    Some(format!(
                        "no admissible model: best RMSE {best_rmse:.3} exceeds tau = {tau}; add sensors or reduce noise"
                    ))
                }
            }
        }
        Mode::StatfemEuclid => {
            let r = pipeline::run_statfem_euclid_with(&bench, data)?;
            io::write_history_csv(&out.join("history.csv"), &r.history)?;
            io::write_json(&out.join("history.json"), &r.history)?;
            io::write_gaussian_field(out, "forecast", &r.forecast)?;
            io::write_gaussian_field(out, "posterior", &r.posterior)?;
            io::write_pce_csv(&out.join("pce.csv"), &r.expansion)?;
            if let Some(d) = &r.discovered {
                io::write_pareto_csv(&out.join("pareto.csv"), &d.pareto_path, &lib)?;
            }
            let (ux, uy) = io::components(&r.data.u_true);
            let (mx, my) = io::components(&r.posterior.mean);
            let mut cols = vec![("u_true_x", &ux), ("u_true_y", &uy), ("posterior_x", &mx), ("posterior_y", &my)];
            let pointwise;
            let disc_xy;
            if let (Some(k), Some(u)) = (&r.model, &r.u_disc) {
                pointwise = metrics::pointwise_errors(&bench.mesh, u, &r.data.u_true, &k.clone().into(), &bench.truth.clone().into())
                    .map_err(io_err)?;
                disc_xy = io::components(u);
                cols.extend([
                    ("u_disc_x", &disc_xy.0),
                    ("u_disc_y", &disc_xy.1),
                    ("displacement_error", &pointwise.0),
                    ("von_mises_error", &pointwise.1),
                ]);
            }
            io::write_nodal_csv(&out.join("fields.csv"), &bench.mesh, &cols)?;
            m.iterations = Some(r.history.records.len());
            m.converged = Some(r.history.converged);
            m.tol = Some(r.history.tol);
            for rec in &r.history.records {
                let model = rec.kappa.as_ref().map(euclid::format_energy).unwrap_or_else(|| "linear elastic prior".into());
                println!("iteration {}: RMSE_u = {:.4e} (TOL {:.4e}), model {}", rec.iteration, rec.rmse_u, r.history.tol, model);
                if let Some(f) = &rec.discovery_failure {
                    println!("  discovery: {f}");
                }
            }
            match &r.model {
                Some(k) => {
                    let mut file = r.discovered.as_ref().map(ModelFile::from_discovered).unwrap_or_else(|| ModelFile::from_params(k));
                    file.expression = euclid::format_energy(k);
                    io::write_json(&out.join("discovered_model.json"), &file)?;
                    m.expression = Some(file.expression);
                    m.eps_w = r.eps_w.map(|e| e.value);
                    m.eps_w_excluded_fraction = r.eps_w.map(|e| e.excluded_fraction());
                    m.eps_u = r.eps_u;
                    m.outcome = if r.history.converged { "converged" } else { "unconverged" }.into();
                    if !r.history.converged {
                        eprintln!("warning: loop did not converge; additional sensors may be needed");
                    }
                    None
                }
                None => {
                    m.outcome = "no admissible model".into();
                    Some("no admissible model was discovered in any iteration; add sensors or reduce noise".into())
                }
            }
        }
    };
    io::write_json(&out.join("metrics.json"), &m)?;
    if let Some(e) = &m.expression {
        println!("W = {e}");
    }
    print_row(&m);
    match failure {
        Some(msg) => Err(Failure::NoModel(msg)),
        None => Ok(()),
    }
}

fn cmd_benchmark_suite(common: &Common, presets: &[String], sigmas: &[f64]) -> Result<()> {
    let run = prepare(common)?;
    let mut rows: Vec<SuiteRow> = Vec::new();
    for &sigma in sigmas {
        for preset in presets {
            eprintln!("suite: {preset}, sigma_e = {sigma:e}");
            rows.extend(pipeline::suite_rows(&run.config, preset, sigma)?);
        }
    }
    let path = run.out.join("suite.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io_err)?;
    for r in &rows {
        w.serialize(r).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    for r in &rows {
        println!("{} | {} | {} | {:e} | {}", r.truth, r.method, r.n_sen, r.sigma_e, r.model);
    }
    Ok(())
}

fn cmd_metrics(common: &Common, model: &Path) -> Result<()> {
    let run = prepare(common)?;
    let text = fs::read_to_string(model)
        .with_context(|| format!("cannot read model {}", model.display()))
        .map_err(Failure::Config)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Failure::Config(e.into()))?;
    let lib = run.config.feature_library()?;
    let pairs: Vec<(&str, f64)> = file.coefficients.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let params = MaterialParams::from_named(lib, &pairs).map_err(|e| Failure::Config(e.into()))?;
    let bench = Benchmark::new(&run.config)?;
    let data = pipeline::benchmark_data(&bench)?;
    let (e_w, e_u) = pipeline::model_metrics(&bench, &data, &params)?;
    let m = MetricsFile {
        method: "saved".into(),
        n_sen: bench.sensors.n_sen(),
        sigma_e: data.sigma_e,
        expression: Some(euclid::format_energy(&params)),
        eps_w: Some(e_w.value),
        eps_w_excluded_fraction: Some(e_w.excluded_fraction()),
        eps_u: e_u,
        iterations: None,
        converged: None,
        tol: None,
        outcome: "evaluated".into(),
    };
    io::write_json(&run.out.join("metrics.json"), &m)?;
    print_row(&m);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Forward { common, material } => cmd_forward(common, *material),
        Command::GenerateData { common } => cmd_generate_data(common),
        Command::Discover { common, mode } => cmd_discover(common, *mode),
        Command::BenchmarkSuite { common, presets, sigmas } => cmd_benchmark_suite(common, presets, sigmas),
        Command::Metrics { common, model } => cmd_metrics(common, model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(e) => eprintln!("config error: {e:#}"),
                Failure::Numerical(e) => eprintln!("error: {e:#}"),
                Failure::NoModel(msg) => eprintln!("{msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}

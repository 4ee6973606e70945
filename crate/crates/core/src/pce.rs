//! Non-intrusive Hermite chaos surrogate of the forward model under a random
//! traction of one standard-normal variable.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::mesh::Mesh;
use crate::solver::{self, LoadCase, Material, SolverError, SolverSettings};
use crate::statfem::GaussianField;

#[derive(Debug, Error)]
pub enum PceError {
    #[error("need at least {needed} samples for order {order}, got {got}")]
    TooFewSamples { needed: usize, got: usize, order: usize },
    #[error("rank-deficient design matrix (smallest/largest singular value {ratio:e}); duplicate sample points?")]
    RankDeficient { ratio: f64 },
    #[error("sample vectors have inconsistent lengths")]
    Inconsistent,
    #[error("forward solve for sample xi = {xi} failed: {source}")]
    Solve { xi: f64, source: SolverError },
}

/// `t̄(ξ) = μ + σ ξ`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TractionRandomField {
    pub mu_t: [f64; 2],
    pub sigma_t: [f64; 2],
}

pub fn sample_traction(field: &TractionRandomField, xi: f64) -> [f64; 2] {
    [field.mu_t[0] + field.sigma_t[0] * xi, field.mu_t[1] + field.sigma_t[1] * xi]
}

/// Probabilists' Hermite polynomial `He_n(x)`.
pub fn hermite(n: usize, x: f64) -> f64 {
    hermite_all(n, x)[n]
}

/// `[He_0(x), ..., He_p(x)]` by the three-term recurrence.
pub fn hermite_all(p: usize, x: f64) -> Vec<f64> {
    let mut h = vec![1.0; p + 1];
    if p >= 1 {
        h[1] = x;
    }
    for n in 1..p {
        h[n + 1] = x * h[n] - n as f64 * h[n - 1];
    }
    h
}

/// `⟨He_j²⟩ = j!`
pub fn hermite_norm_sq(j: usize) -> f64 {
    (1..=j).map(|k| k as f64).product()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCExpansion {
    pub coeffs: Vec<DVector<f64>>,
}

impl PCExpansion {
    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.coeffs[0].len()
    }

    pub fn evaluate(&self, xi: f64) -> DVector<f64> {
        let h = hermite_all(self.order(), xi);
        self.coeffs
            .iter()
            .zip(h)
            .fold(DVector::zeros(self.dim()), |acc, (c, hj)| acc + c * hj)
    }
}

/// Diagnostics of the regression fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PceFit {
    /// `‖ΨᵀΨ U − ΨᵀY‖_F / ‖ΨᵀY‖_F`
    pub normal_equation_residual: f64,
    /// Relative sample misfit `‖ΨU − Y‖_F / ‖Y‖_F`.
    pub sample_residual: f64,
}

/// Least-squares fit of Hermite coefficients to `(ξ_s, u(ξ_s))` samples.
pub fn fit_pce(samples: &[(f64, DVector<f64>)], order: usize) -> Result<(PCExpansion, PceFit), PceError> {
    let s = samples.len();
    if s < order + 1 {
        return Err(PceError::TooFewSamples { needed: order + 1, got: s, order });
    }
    let n = samples[0].1.len();
    if samples.iter().any(|(_, u)| u.len() != n) {
        return Err(PceError::Inconsistent);
    }
    let psi = DMatrix::from_fn(s, order + 1, |r, j| hermite(j, samples[r].0));
    let y = DMatrix::from_fn(s, n, |r, c| samples[r].1[c]);
    let svd = psi.clone().svd(true, true);
    let sv = &svd.singular_values;
    let ratio = sv.min() / sv.max();
    if !(ratio > 1e-12) {
        return Err(PceError::RankDeficient { ratio });
    }
    let u = svd.solve(&y, 0.0).map_err(|_| PceError::RankDeficient { ratio })?;
    let pty = psi.transpose() * &y;
    let ne = (psi.transpose() * &psi * &u - &pty).norm() / pty.norm().max(f64::MIN_POSITIVE);
    let sr = (&psi * &u - &y).norm() / y.norm().max(f64::MIN_POSITIVE);
    let coeffs = (0..=order).map(|j| u.row(j).transpose()).collect();
    Ok((PCExpansion { coeffs }, PceFit { normal_equation_residual: ne, sample_residual: sr }))
}

/// Forecast moments `μ = u_0`, `C = Σ_{j≥1} j! u_j u_jᵀ`.
pub fn pce_moments(expansion: &PCExpansion) -> GaussianField {
    let n = expansion.dim();
    let mut cov = DMatrix::zeros(n, n);
    for (j, u) in expansion.coeffs.iter().enumerate().skip(1) {
        cov.ger(hermite_norm_sq(j), u, u, 1.0);
    }
    GaussianField { mean: expansion.coeffs[0].clone(), cov }
}

/// Stratified standard-normal nodes: one draw inside each of `s` equal-probability strata.
///
/// With `jitter = false` the stratum midpoints are used.
pub fn stratified_normal_nodes(s: usize, seed: u64, jitter: bool) -> Vec<f64> {
    let normal = Normal::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..s)
        .map(|k| {
            let offset = if jitter { rng.random_range(0.05..0.95) } else { 0.5 };
            normal.inverse_cdf((k as f64 + offset) / s as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PceSettings {
    /// Chaos order P_u.
    pub order: usize,
    /// Number of samples S.
    pub n_samples: usize,
    /// Traction standard deviation as a fraction of T_max (x-direction).
    pub sigma_t_ratio: f64,
    #[serde(default = "default_jitter")]
    pub jitter: bool,
}

fn default_jitter() -> bool {
    true
}

impl Default for PceSettings {
    fn default() -> Self {
        PceSettings { order: 3, n_samples: 20, sigma_t_ratio: 0.05, jitter: true }
    }
}

/// Forward solve that retries once with doubled load steps.
pub fn robust_solve(
    mesh: &Mesh,
    material: &Material,
    load: &LoadCase,
    settings: &SolverSettings,
) -> Result<DVector<f64>, SolverError> {
    match solver::solve_forward(mesh, material, load, settings) {
        Ok(u) => Ok(u.u),
        Err(SolverError::NewtonDivergence { .. } | SolverError::InvertedElement { .. }) => {
            let retry = SolverSettings { n_load_steps: settings.n_load_steps * 2, ..*settings };
            Ok(solver::solve_forward(mesh, material, load, &retry)?.u)
        }
        Err(e) => Err(e),
    }
}

/// Samples the random traction, solves each realization in parallel and fits the chaos.
pub fn build_forecast(
    mesh: &Mesh,
    material: &Material,
    field: &TractionRandomField,
    settings: &PceSettings,
    solver_settings: &SolverSettings,
    seed: u64,
) -> Result<(PCExpansion, PceFit), PceError> {
    let xis = stratified_normal_nodes(settings.n_samples, seed, settings.jitter);
    let samples: Vec<(f64, DVector<f64>)> = xis
        .par_iter()
        .map(|&xi| {
            let t = sample_traction(field, xi);
            let load = LoadCase { traction: t, eta: 1.0, body_force: [0.0, 0.0] };
            robust_solve(mesh, material, &load, solver_settings)
                .map(|u| (xi, u))
                .map_err(|source| PceError::Solve { xi, source })
        })
        .collect::<Result<_, _>>()?;
    fit_pce(&samples, settings.order)
}

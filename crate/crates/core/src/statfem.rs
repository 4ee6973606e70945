//! Gaussian conditioning of a forecast displacement field on sensor data.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::symmetrize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatFemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise standard deviation must be positive, got {0}")]
    NonPositiveNoise(f64),
    #[error("singular posterior system (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("observation set needs at least one reading")]
    NoReadings,
}

/// Mean and covariance over all FE degrees of freedom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianField {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianField {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, StatFemError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(StatFemError::Dimension(format!(
                "mean {} vs covariance {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(GaussianField { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Relative asymmetry `‖C − Cᵀ‖_F / ‖C‖_F`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.cov.norm();
        if n == 0.0 {
            0.0
        } else {
            (&self.cov - self.cov.transpose()).norm() / n
        }
    }
}

/// Sensor readings with a selection observation operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// Observed global DOF of each row of H.
    pub dofs: Vec<usize>,
    /// Number of DOFs of the observed field.
    pub n_gdof: usize,
    /// One stacked reading vector per repetition.
    pub y: Vec<DVector<f64>>,
    pub sigma_e: f64,
}

impl ObservationSet {
    pub fn new(dofs: Vec<usize>, n_gdof: usize, y: Vec<DVector<f64>>, sigma_e: f64) -> Result<Self, StatFemError> {
        if !(sigma_e > 0.0) {
            return Err(StatFemError::NonPositiveNoise(sigma_e));
        }
        if y.is_empty() {
            return Err(StatFemError::NoReadings);
        }
        if let Some(&d) = dofs.iter().find(|&&d| d >= n_gdof) {
            return Err(StatFemError::Dimension(format!("observed DOF {d} >= {n_gdof}")));
        }
        if let Some(r) = y.iter().find(|r| r.len() != dofs.len()) {
            return Err(StatFemError::Dimension(format!("reading of length {} for {} rows", r.len(), dofs.len())));
        }
        Ok(ObservationSet { dofs, n_gdof, y, sigma_e })
    }

    pub fn n_r(&self) -> usize {
        self.y.len()
    }

    pub fn n_gsen(&self) -> usize {
        self.dofs.len()
    }

    /// Explicit `n_gsen × n_gdof` observation matrix.
    pub fn h_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dofs.len(), self.n_gdof);
        for (r, &d) in self.dofs.iter().enumerate() {
            h[(r, d)] = 1.0;
        }
        h
    }

    /// `Σ_i y_i`
    pub fn sum_readings(&self) -> DVector<f64> {
        self.y.iter().fold(DVector::zeros(self.dofs.len()), |a, r| a + r)
    }

    /// Mean of the readings.
    pub fn mean_reading(&self) -> DVector<f64> {
        self.sum_readings() / self.n_r() as f64
    }

    fn check(&self, prior: &GaussianField) -> Result<(), StatFemError> {
        if prior.dim() != self.n_gdof {
            return Err(StatFemError::Dimension(format!("prior {} vs observation operator {}", prior.dim(), self.n_gdof)));
        }
        Ok(())
    }
}

/// Outcome of the SPD repair.
#[derive(Debug, Clone)]
pub struct SpdRepair {
    pub matrix: DMatrix<f64>,
    /// Diagonal shift that made the Cholesky factorization succeed.
    pub delta: f64,
}

/// Nearest symmetric positive definite matrix in the Frobenius norm.
///
/// Symmetrize, average with the symmetric polar factor, then shift by the
/// smallest `δ I` (doubled from machine-epsilon scale) admitting Cholesky.
/// Matrices that already factor are returned symmetrized with `δ = 0`.
pub fn nearest_spd(m: &DMatrix<f64>) -> SpdRepair {
    assert!(m.is_square(), "nearest_spd expects a square matrix");
    let b = symmetrize(m);
    if Cholesky::new(b.clone()).is_some() {
        return SpdRepair { matrix: b, delta: 0.0 };
    }
    let svd = b.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let h = v_t.transpose() * DMatrix::from_diagonal(&svd.singular_values) * &v_t;
    let m0 = symmetrize(&((&b + h) * 0.5));
    let n = m0.nrows();
    let scale = if m0.norm() > 0.0 { m0.norm() } else { 1.0 };
    if Cholesky::new(m0.clone()).is_some() {
        return SpdRepair { matrix: m0, delta: 0.0 };
    }
    let mut delta = f64::EPSILON * scale;
    loop {
        let shifted = &m0 + DMatrix::identity(n, n) * delta;
        if Cholesky::new(shifted.clone()).is_some() {
            return SpdRepair { matrix: shifted, delta };
        }
        delta *= 2.0;
    }
}

fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, StatFemError> {
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => Err(StatFemError::Singular { condition: condition_estimate(&m) }),
    }
}

/// Eigenvalue-magnitude ratio, for error reporting only.
fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = symmetrize(m).symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Posterior in precision form:
/// `C_ua = (n_r Hᵀ C_e⁻¹ H + SPD(C_uf)⁻¹)⁻¹`,
/// `μ_ua = C_ua (Hᵀ C_e⁻¹ Σ y + SPD(C_uf)⁻¹ μ_uf)`.
pub fn posterior_update(prior: &GaussianField, obs: &ObservationSet) -> Result<GaussianField, StatFemError> {
    obs.check(prior)?;
    let n = prior.dim();
    let repaired = nearest_spd(&prior.cov).matrix;
    let chol_prior = cholesky(repaired)?;
    let prior_precision = chol_prior.inverse();
    let w = 1.0 / (obs.sigma_e * obs.sigma_e);
    let mut precision = symmetrize(&prior_precision);
    for &d in &obs.dofs {
        precision[(d, d)] += obs.n_r() as f64 * w;
    }
    let mut rhs = chol_prior.solve(&prior.mean);
    let sum_y = obs.sum_readings();
    for (r, &d) in obs.dofs.iter().enumerate() {
        rhs[d] += w * sum_y[r];
    }
    let chol_post = cholesky(precision)?;
    let mean = chol_post.solve(&rhs);
    let cov = symmetrize(&chol_post.inverse());
    debug_assert_eq!(mean.len(), n);
    Ok(GaussianField { mean, cov })
}

/// Posterior in gain form, `K = C Hᵀ (H C Hᵀ + C_e / n_r)⁻¹`, evaluated on the
/// SPD-repaired prior covariance. Algebraically identical to [`posterior_update`].
pub fn posterior_update_gain(prior: &GaussianField, obs: &ObservationSet) -> Result<GaussianField, StatFemError> {
    obs.check(prior)?;
    let c = nearest_spd(&prior.cov).matrix;
    let m = obs.n_gsen();
    // C Hᵀ is a column selection
    let cht = DMatrix::from_fn(c.nrows(), m, |i, r| c[(i, obs.dofs[r])]);
    let mut s = DMatrix::from_fn(m, m, |a, b| cht[(obs.dofs[a], b)]);
    let noise = obs.sigma_e * obs.sigma_e / obs.n_r() as f64;
    for a in 0..m {
        s[(a, a)] += noise;
    }
    let chol = cholesky(symmetrize(&s))?;
    let innovation = obs.mean_reading() - DVector::from_iterator(m, obs.dofs.iter().map(|&d| prior.mean[d]));
    let mean = &prior.mean + &cht * chol.solve(&innovation);
    // C − K H C with K H C = C Hᵀ S⁻¹ H C
    let s_inv_hc = chol.solve(&cht.transpose());
    let cov = symmetrize(&(&c - &cht * s_inv_hc));
    Ok(GaussianField { mean, cov })
}

/// Gaussian over the observed DOFs: `μ_z = H μ`, `C_z = H C Hᵀ`.
pub fn predict_at_sensors(posterior: &GaussianField, dofs: &[usize]) -> GaussianField {
    let mean = DVector::from_iterator(dofs.len(), dofs.iter().map(|&d| posterior.mean[d]));
    let cov = DMatrix::from_fn(dofs.len(), dofs.len(), |a, b| posterior.cov[(dofs[a], dofs[b])]);
    GaussianField { mean, cov }
}

/// `sqrt(‖μ_z − y‖² / n_sen)`
pub fn rmse_sensors(mu_z: &DVector<f64>, y: &DVector<f64>, n_sen: usize) -> Result<f64, StatFemError> {
    if mu_z.len() != y.len() {
        return Err(StatFemError::Dimension(format!("prediction {} vs data {}", mu_z.len(), y.len())));
    }
    if n_sen == 0 {
        return Err(StatFemError::Dimension("zero sensors".into()));
    }
    Ok(((mu_z - y).norm_squared() / n_sen as f64).sqrt())
}

//! Error measures between a discovered and the ground-truth material.

use nalgebra::{DVector, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{self, MaterialParams};
use crate::mesh::Mesh;
use crate::solver::{self, Material, SolverError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("reference displacement field is zero")]
    ZeroReference,
    #[error("field lengths differ: {0} vs {1}")]
    Length(usize, usize),
    #[error("invariant range is empty")]
    EmptyRange,
}

/// `[min, max]` of each modified invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvariantRanges {
    pub j1: [f64; 2],
    pub j2: [f64; 2],
    pub j3: [f64; 2],
}

/// Ranges observed over all quadrature points of a displacement field.
pub fn invariant_ranges(mesh: &Mesh, u: &DVector<f64>) -> Result<InvariantRanges, MetricsError> {
    let mut r = InvariantRanges {
        j1: [f64::INFINITY, f64::NEG_INFINITY],
        j2: [f64::INFINITY, f64::NEG_INFINITY],
        j3: [f64::INFINITY, f64::NEG_INFINITY],
    };
    for e in 0..mesh.elements.len() {
        for (_, st) in solver::element_states(mesh, e, u)? {
            for (range, v) in [(&mut r.j1, st.j1), (&mut r.j2, st.j2), (&mut r.j3, st.j3)] {
                range[0] = range[0].min(v);
                range[1] = range[1].max(v);
            }
        }
    }
    if !r.j1[0].is_finite() {
        return Err(MetricsError::EmptyRange);
    }
    Ok(r)
}

/// Relative strain-energy error over a regular invariant grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyError {
    pub value: f64,
    /// Grid points skipped because `|W_true| < 1e-14`.
    pub excluded: usize,
    pub total: usize,
}

impl EnergyError {
    pub fn excluded_fraction(&self) -> f64 {
        self.excluded as f64 / self.total as f64
    }
}

/// Grid points with a true energy this small are excluded.
pub const ENERGY_EXCLUSION: f64 = 1e-14;

/// Mean over an `n³` grid of `(W_disc − W_true)² / W_true²`.
pub fn error_eps_w(
    truth: &MaterialParams,
    disc: &MaterialParams,
    ranges: &InvariantRanges,
    n: usize,
) -> Result<EnergyError, MetricsError> {
    if n == 0 {
        return Err(MetricsError::EmptyRange);
    }
    let grid = |r: [f64; 2]| -> Vec<f64> {
        if n == 1 {
            vec![r[0]]
        } else {
            (0..n).map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let (g1, g2, g3) = (grid(ranges.j1), grid(ranges.j2), grid(ranges.j3));
    let energy = |p: &MaterialParams, j1: f64, j2: f64, j3: f64| {
        constitutive::evaluate_features_at(j1, j2, j3, &p.library).dot(&p.kappa)
    };
    let (sum, excluded) = g1
        .par_iter()
        .map(|&j1| {
            let mut sum = 0.0;
            let mut excluded = 0;
            for &j2 in &g2 {
                for &j3 in &g3 {
                    let wt = energy(truth, j1, j2, j3);
                    if wt.abs() < ENERGY_EXCLUSION {
                        excluded += 1;
                        continue;
                    }
                    let wd = energy(disc, j1, j2, j3);
                    sum += ((wd - wt) / wt).powi(2);
                }
            }
            (sum, excluded)
        })
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let total = n * n * n;
    let kept = total - excluded;
    let value = if kept == 0 { 0.0 } else { sum / kept as f64 };
    Ok(EnergyError { value, excluded, total })
}

/// `‖u_disc − u_true‖ / ‖u_true‖`
pub fn error_eps_u(u_disc: &DVector<f64>, u_true: &DVector<f64>) -> Result<f64, MetricsError> {
    if u_disc.len() != u_true.len() {
        return Err(MetricsError::Length(u_disc.len(), u_true.len()));
    }
    let n = u_true.norm();
    if n == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok((u_disc - u_true).norm() / n)
}

/// `σ = J⁻¹ F S Fᵀ`
pub fn cauchy_stress(f: &Matrix2<f64>, s: &Matrix2<f64>) -> Matrix2<f64> {
    f * s * f.transpose() / f.determinant()
}

/// `√(σ_xx² − σ_xx σ_yy + σ_yy² + 3 σ_xy²)`
pub fn von_mises(sigma: &Matrix2<f64>) -> f64 {
    let (xx, yy, xy) = (sigma[(0, 0)], sigma[(1, 1)], sigma[(0, 1)]);
    (xx * xx - xx * yy + yy * yy + 3.0 * xy * xy).sqrt()
}

/// Second Piola–Kirchhoff stress of any material at a deformation gradient.
fn pk2(material: &Material, f: &Matrix2<f64>) -> Result<Matrix2<f64>, MetricsError> {
    match material {
        Material::Hyperelastic { params } => {
            let st = constitutive::DeformationState::from_f(*f).map_err(SolverError::from)?;
            Ok(constitutive::second_pk_stress(&st, params).map_err(SolverError::from)?)
        }
        Material::LinearElastic { youngs_modulus, poisson_ratio } => {
            let eps = (f + f.transpose()) * 0.5 - Matrix2::identity();
            Ok(constitutive::linear_elastic_stress(&eps, *youngs_modulus, *poisson_ratio).map_err(SolverError::from)?)
        }
    }
}

/// Nodal von Mises stress from Gauss-point values by lumped least squares,
/// `v_a = Σ N_a w σ_vM / Σ N_a w`.
pub fn nodal_von_mises(mesh: &Mesh, u: &DVector<f64>, material: &Material) -> Result<DVector<f64>, MetricsError> {
    let mut num = DVector::<f64>::zeros(mesh.n_dof());
    let mut den = DVector::<f64>::zeros(mesh.n_dof());
    for e in 0..mesh.elements.len() {
        for (gp, st) in solver::element_states(mesh, e, u)? {
            let s = pk2(material, &st.f)?;
            let vm = if material.is_linear() { von_mises(&s) } else { von_mises(&cauchy_stress(&st.f, &s)) };
            for (a, &node) in mesh.elements[e].iter().enumerate() {
                num[node] += gp.n[a] * gp.weight * vm;
                den[node] += gp.n[a] * gp.weight;
            }
        }
    }
    Ok(num.zip_map(&den, |n, d| if d > 0.0 { n / d } else { 0.0 }))
}

/// Nodal fields `|u_disc − u_true|` (mm) and `|σ_vM,disc − σ_vM,true|` (MPa).
pub fn pointwise_errors(
    mesh: &Mesh,
    u_disc: &DVector<f64>,
    u_true: &DVector<f64>,
    disc: &Material,
    truth: &Material,
) -> Result<(DVector<f64>, DVector<f64>), MetricsError> {
    if u_disc.len() != u_true.len() {
        return Err(MetricsError::Length(u_disc.len(), u_true.len()));
    }
    let du = DVector::from_fn(mesh.n_dof(), |a, _| {
        let dx = u_disc[2 * a] - u_true[2 * a];
        let dy = u_disc[2 * a + 1] - u_true[2 * a + 1];
        dx.hypot(dy)
    });
    let vd = nodal_von_mises(mesh, u_disc, disc)?;
    let vt = nodal_von_mises(mesh, u_true, truth)?;
    Ok((du, (vd - vt).abs()))
}

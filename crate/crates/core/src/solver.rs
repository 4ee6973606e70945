//! Total-Lagrangian finite element forward solver.

use std::collections::BTreeMap;

use nalgebra::{DVector, Matrix2, Matrix3, SMatrix, SVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{self, ConstitutiveError, DeformationState, MaterialParams};
use crate::linalg::{self, LinalgError, Triplets};
use crate::mesh::{GaussPoint, Mesh, MeshError};

type Vec8 = SVector<f64, 8>;
type Mat8 = SMatrix<f64, 8, 8>;
type Mat38 = SMatrix<f64, 3, 8>;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("element {element} inverted (det F = {det_f:e})")]
    InvertedElement { element: usize, det_f: f64 },
    #[error("Newton failed to converge at load step {step}/{n_steps}: residual {residual:e} after {iterations} iterations")]
    NewtonDivergence { step: usize, n_steps: usize, residual: f64, iterations: usize },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Constitutive(#[from] ConstitutiveError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid solver input: {0}")]
    Invalid(String),
}

/// Constitutive behaviour used by the forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Material {
    /// Feature-library strain energy.
    Hyperelastic { params: MaterialParams },
    /// Small-strain isotropic elasticity.
    LinearElastic { youngs_modulus: f64, poisson_ratio: f64 },
}

impl Material {
    pub fn is_linear(&self) -> bool {
        matches!(self, Material::LinearElastic { .. })
    }

    pub fn params(&self) -> Option<&MaterialParams> {
        match self {
            Material::Hyperelastic { params } => Some(params),
            Material::LinearElastic { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        match self {
            Material::Hyperelastic { params } => {
                if params.kappa.len() != params.library.n_phi() {
                    return Err(ConstitutiveError::LibraryMismatch {
                        expected: params.library.n_phi(),
                        got: params.kappa.len(),
                    }
                    .into());
                }
            }
            Material::LinearElastic { youngs_modulus, poisson_ratio } => {
                constitutive::linear_elastic_matrix(*youngs_modulus, *poisson_ratio)?;
            }
        }
        Ok(())
    }
}

impl From<MaterialParams> for Material {
    fn from(params: MaterialParams) -> Self {
        Material::Hyperelastic { params }
    }
}

/// Dead load on the Neumann boundary plus an optional body force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadCase {
    /// Traction vector (MPa).
    pub traction: [f64; 2],
    /// Load scale in [0, 1].
    pub eta: f64,
    #[serde(default)]
    pub body_force: [f64; 2],
}

impl LoadCase {
    /// x-directed traction of magnitude `t_max` scaled by `eta`.
    pub fn uniaxial(t_max: f64, eta: f64) -> Self {
        LoadCase { traction: [t_max, 0.0], eta, body_force: [0.0, 0.0] }
    }

    fn validate(&self) -> Result<(), SolverError> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(SolverError::Invalid(format!("load scale {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub newton_tol: f64,
    pub max_iters: usize,
    pub n_load_steps: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { newton_tol: 1e-10, max_iters: 25, n_load_steps: 5 }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<(), SolverError> {
        if !(self.newton_tol > 0.0) || self.n_load_steps < 1 || self.max_iters < 1 {
            return Err(SolverError::Invalid(format!("bad settings {self:?}")));
        }
        Ok(())
    }
}

/// Nodal displacements in mesh DOF order (mm).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub u: DVector<f64>,
}

impl DisplacementField {
    pub fn zeros(n_gdof: usize) -> Self {
        DisplacementField { u: DVector::zeros(n_gdof) }
    }

    pub fn node(&self, n: usize) -> [f64; 2] {
        [self.u[2 * n], self.u[2 * n + 1]]
    }
}

/// Convergence record of a forward solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Residual norms of every Newton iteration, per load step.
    pub residual_history: Vec<Vec<f64>>,
    pub final_residual: f64,
}

impl SolveReport {
    pub fn iterations(&self) -> Vec<usize> {
        self.residual_history.iter().map(Vec::len).collect()
    }
}

/// Deformation gradient at a quadrature point.
pub fn deformation_gradient(gp: &GaussPoint, ue: &[f64; 8]) -> Matrix2<f64> {
    let mut f = Matrix2::identity();
    for a in 0..4 {
        for i in 0..2 {
            for j in 0..2 {
                f[(i, j)] += ue[2 * a + i] * gp.dn_dx[a][j];
            }
        }
    }
    f
}

/// Nonlinear strain-displacement matrix for engineering Green–Lagrange strain.
pub fn b_matrix(gp: &GaussPoint, f: &Matrix2<f64>) -> Mat38 {
    let mut b = Mat38::zeros();
    for a in 0..4 {
        let (n1, n2) = (gp.dn_dx[a][0], gp.dn_dx[a][1]);
        for k in 0..2 {
            b[(0, 2 * a + k)] = f[(k, 0)] * n1;
            b[(1, 2 * a + k)] = f[(k, 1)] * n2;
            b[(2, 2 * a + k)] = f[(k, 0)] * n2 + f[(k, 1)] * n1;
        }
    }
    b
}

fn element_displacements(mesh: &Mesh, e: usize, u: &DVector<f64>) -> [f64; 8] {
    let dofs = mesh.element_dofs(e);
    std::array::from_fn(|i| u[dofs[i]])
}

/// Kinematic state at each quadrature point of an element.
pub fn element_states(
    mesh: &Mesh,
    e: usize,
    u: &DVector<f64>,
) -> Result<Vec<(GaussPoint, DeformationState)>, SolverError> {
    let ue = element_displacements(mesh, e, u);
    mesh.gauss_points(e)?
        .into_iter()
        .map(|gp| {
            let f = deformation_gradient(&gp, &ue);
            let s = DeformationState::from_f(f).map_err(|err| match err {
                ConstitutiveError::InvertedElement(det_f) => SolverError::InvertedElement { element: e, det_f },
                other => other.into(),
            })?;
            Ok((gp, s))
        })
        .collect()
}

fn element_kernel(
    mesh: &Mesh,
    e: usize,
    u: &DVector<f64>,
    material: &Material,
    with_tangent: bool,
) -> Result<(Vec8, Option<Mat8>), SolverError> {
    let mut fe = Vec8::zeros();
    let mut ke = with_tangent.then(Mat8::zeros);
    match material {
        Material::LinearElastic { youngs_modulus, poisson_ratio } => {
            let d = constitutive::linear_elastic_matrix(*youngs_modulus, *poisson_ratio)?;
            let ue = Vec8::from_column_slice(&element_displacements(mesh, e, u));
            for gp in mesh.gauss_points(e)? {
                let b = b_matrix(&gp, &Matrix2::identity());
                let k = b.transpose() * d * b * gp.weight;
                fe += k * ue;
                if let Some(ke) = ke.as_mut() {
                    *ke += k;
                }
            }
        }
        Material::Hyperelastic { params } => {
            for (gp, st) in element_states(mesh, e, u)? {
                let b = b_matrix(&gp, &st.f);
                let (s, d) = if with_tangent {
                    constitutive::stress_and_tangent(&st, params)?
                } else {
                    (constitutive::second_pk_stress(&st, params)?, Matrix3::zeros())
                };
                let sv = constitutive::to_voigt(&s);
                fe += b.transpose() * sv * gp.weight;
                if let Some(ke) = ke.as_mut() {
                    *ke += b.transpose() * d * b * gp.weight;
                    for a in 0..4 {
                        for c in 0..4 {
                            let g = gp.weight
                                * (0..2)
                                    .map(|i| (0..2).map(|j| gp.dn_dx[a][i] * s[(i, j)] * gp.dn_dx[c][j]).sum::<f64>())
                                    .sum::<f64>();
                            ke[(2 * a, 2 * c)] += g;
                            ke[(2 * a + 1, 2 * c + 1)] += g;
                        }
                    }
                }
            }
        }
    }
    Ok((fe, ke))
}

fn assemble(
    mesh: &Mesh,
    u: &DVector<f64>,
    material: &Material,
    with_tangent: bool,
) -> Result<(DVector<f64>, Vec<([usize; 8], Mat8)>), SolverError> {
    let parts: Vec<_> = (0..mesh.elements.len())
        .into_par_iter()
        .map(|e| element_kernel(mesh, e, u, material, with_tangent).map(|r| (e, r)))
        .collect::<Result<_, _>>()?;
    let mut f = DVector::zeros(mesh.n_gdof());
    let mut ks = Vec::new();
    // sequential reduction in element order keeps results bitwise reproducible
    for (e, (fe, ke)) in parts {
        let dofs = mesh.element_dofs(e);
        for i in 0..8 {
            f[dofs[i]] += fe[i];
        }
        if let Some(ke) = ke {
            ks.push((dofs, ke));
        }
    }
    Ok((f, ks))
}

/// Assembled internal force `∫ P : ∇v dΩ` over all DOFs, Dirichlet rows included.
pub fn internal_force(mesh: &Mesh, u: &DVector<f64>, material: &Material) -> Result<DVector<f64>, SolverError> {
    Ok(assemble(mesh, u, material, false)?.0)
}

/// Full tangent stiffness over all DOFs.
pub fn tangent(mesh: &Mesh, u: &DVector<f64>, material: &Material) -> Result<Triplets, SolverError> {
    let (_, ks) = assemble(mesh, u, material, true)?;
    let mut t = Triplets::new(mesh.n_gdof());
    for (dofs, ke) in ks {
        for i in 0..8 {
            for j in 0..8 {
                t.push(dofs[i], dofs[j], ke[(i, j)]);
            }
        }
    }
    Ok(t)
}

/// Consistent nodal loads from edge tractions and body forces.
pub fn external_force(mesh: &Mesh, load: &LoadCase) -> DVector<f64> {
    let mut f = DVector::zeros(mesh.n_gdof());
    if load.eta == 0.0 {
        return f;
    }
    let t = [load.eta * load.traction[0], load.eta * load.traction[1]];
    for &(e, edge) in &mesh.neumann_edges {
        let (a, b) = mesh.edge_nodes(e, edge);
        let half = 0.5 * mesh.edge_length(e, edge);
        for n in [a, b] {
            f[2 * n] += t[0] * half;
            f[2 * n + 1] += t[1] * half;
        }
    }
    if load.body_force != [0.0, 0.0] {
        for e in 0..mesh.elements.len() {
            let conn = mesh.elements[e];
            let gps = mesh.gauss_points(e).expect("validated mesh");
            for gp in gps {
                for a in 0..4 {
                    f[2 * conn[a]] += load.eta * load.body_force[0] * gp.n[a] * gp.weight;
                    f[2 * conn[a] + 1] += load.eta * load.body_force[1] * gp.n[a] * gp.weight;
                }
            }
        }
    }
    f
}

/// Maps global DOFs to the reduced free-DOF numbering.
struct DofMap {
    free: Vec<usize>,
    reduced: Vec<Option<usize>>,
}

impl DofMap {
    fn new(mesh: &Mesh, fixed: &BTreeMap<usize, f64>) -> Self {
        let free: Vec<usize> = (0..mesh.n_gdof()).filter(|d| !fixed.contains_key(d)).collect();
        let mut reduced = vec![None; mesh.n_gdof()];
        for (i, &d) in free.iter().enumerate() {
            reduced[d] = Some(i);
        }
        DofMap { free, reduced }
    }

    fn restrict(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free.len(), self.free.iter().map(|&d| v[d]))
    }

    fn reduce_tangent(&self, ks: &[([usize; 8], Mat8)]) -> Triplets {
        let mut t = Triplets::new(self.free.len());
        for (dofs, ke) in ks {
            for i in 0..8 {
                let Some(r) = self.reduced[dofs[i]] else { continue };
                for j in 0..8 {
                    if let Some(c) = self.reduced[dofs[j]] {
                        t.push(r, c, ke[(i, j)]);
                    }
                }
            }
        }
        t
    }
}

/// Solves the static boundary value problem with homogeneous Dirichlet data.
pub fn solve_forward(
    mesh: &Mesh,
    material: &Material,
    load: &LoadCase,
    settings: &SolverSettings,
) -> Result<DisplacementField, SolverError> {
    Ok(solve_forward_report(mesh, material, load, settings)?.0)
}

pub fn solve_forward_report(
    mesh: &Mesh,
    material: &Material,
    load: &LoadCase,
    settings: &SolverSettings,
) -> Result<(DisplacementField, SolveReport), SolverError> {
    let fixed: BTreeMap<usize, f64> = mesh.dirichlet_dofs.iter().map(|&d| (d, 0.0)).collect();
    solve_forward_prescribed(mesh, material, load, settings, &fixed)
}

/// Newton solve with load stepping and arbitrary prescribed DOF values.
///
/// Prescribed values are applied in full from the first step; only the external
/// load is ramped.
pub fn solve_forward_prescribed(
    mesh: &Mesh,
    material: &Material,
    load: &LoadCase,
    settings: &SolverSettings,
    prescribed: &BTreeMap<usize, f64>,
) -> Result<(DisplacementField, SolveReport), SolverError> {
    material.validate()?;
    load.validate()?;
    settings.validate()?;
    if let Some((&d, _)) = prescribed.iter().next_back() {
        if d >= mesh.n_gdof() {
            return Err(SolverError::Invalid(format!("prescribed DOF {d} out of range")));
        }
    }
    let map = DofMap::new(mesh, prescribed);
    let mut u = DVector::zeros(mesh.n_gdof());
    for (&d, &v) in prescribed {
        u[d] = v;
    }
    let n_steps = if material.is_linear() { 1 } else { settings.n_load_steps };
    let f_full = external_force(mesh, &LoadCase { eta: 1.0, ..*load });
    let mut history = Vec::with_capacity(n_steps);
    let mut last = 0.0;
    for step in 1..=n_steps {
        let scale = load.eta * step as f64 / n_steps as f64;
        let f_ext = map.restrict(&(&f_full * scale));
        let mut norms = Vec::new();
        let mut converged = false;
        for _ in 0..settings.max_iters.max(1) {
            let (f_int, ks) = assemble(mesh, &u, material, true)?;
            let r = map.restrict(&f_int) - &f_ext;
            let rn = r.norm();
            norms.push(rn);
            last = rn;
            if rn <= settings.newton_tol {
                converged = true;
                break;
            }
            let k = map.reduce_tangent(&ks);
            let du = linalg::solve_symmetric(&k, &(-r))?;
            u = backtrack_update(mesh, material, &map, &u, &du, &f_ext, rn)?;
        }
        if !converged {
            return Err(SolverError::NewtonDivergence {
                step,
                n_steps,
                residual: last,
                iterations: norms.len(),
            });
        }
        history.push(norms);
    }
    Ok((DisplacementField { u }, SolveReport { residual_history: history, final_residual: last }))
}

/// Applies a Newton increment, halving it while elements invert.
fn backtrack_update(
    mesh: &Mesh,
    material: &Material,
    map: &DofMap,
    u: &DVector<f64>,
    du: &DVector<f64>,
    f_ext: &DVector<f64>,
    _rn: f64,
) -> Result<DVector<f64>, SolverError> {
    let mut alpha = 1.0;
    let mut last_err = None;
    for _ in 0..8 {
        let mut trial = u.clone();
        for (i, &d) in map.free.iter().enumerate() {
            trial[d] += alpha * du[i];
        }
        if material.is_linear() {
            return Ok(trial);
        }
        match internal_force(mesh, &trial, material) {
            Ok(fi) => {
                if (map.restrict(&fi) - f_ext).iter().all(|v| v.is_finite()) {
                    return Ok(trial);
                }
            }
            Err(e @ SolverError::InvertedElement { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
        alpha *= 0.5;
    }
    Err(last_err.unwrap_or_else(|| SolverError::Invalid("non-finite residual".into())))
}

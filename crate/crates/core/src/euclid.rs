//! Weak-form sparse regression of strain-energy coefficients.
//!
//! The feature matrix maps coefficients to internal nodal forces,
//! `A(u) κ = f_int(u; κ)`. Equilibrium on the free DOFs, `A κ = p`, is solved as a
//! nonnegative LASSO over a logarithmic λ-path, optionally subject to the
//! volumetric constraint `Σ B_k = r Σ A_ij`, and the most parsimonious admissible
//! model on the path is selected.

use nalgebra::{DMatrix, DVector, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::{self, FeatureLibrary, MaterialParams};
use crate::mesh::Mesh;
use crate::qp::{self, KktReport, QpError};
use crate::solver::{self, b_matrix, SolverError};

/// Coefficients at or below this value are inactive.
pub const ACTIVE_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum EuclidError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("QP failed at lambda = {lambda:e}: {source}")]
    Qp { lambda: f64, source: QpError },
    #[error("no admissible model: best RMSE {best_rmse:.4} is not below tau = {tau}; more sensors may help")]
    NoAdmissibleModel { best_rmse: f64, tau: f64 },
    #[error("invalid regression settings: {0}")]
    Invalid(String),
}

/// Assembled `n_gdof × n_phi` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub a: DMatrix<f64>,
    pub free_rows: Vec<usize>,
    pub library: FeatureLibrary,
}

/// Column `j` is the internal force of feature `j` alone at displacement `u`.
pub fn assemble_feature_matrix(
    mesh: &Mesh,
    u: &DVector<f64>,
    library: &FeatureLibrary,
) -> Result<FeatureMatrix, EuclidError> {
    let n_phi = library.n_phi();
    let parts: Vec<SMatrix<f64, 8, 32>> = (0..mesh.elements.len())
        .into_par_iter()
        .map(|e| -> Result<_, SolverError> {
            let mut ae = SMatrix::<f64, 8, 32>::zeros();
            for (gp, st) in solver::element_states(mesh, e, u)? {
                let b = b_matrix(&gp, &st.f);
                for (j, s) in constitutive::feature_stresses(&st, library).iter().enumerate() {
                    let col = b.transpose() * constitutive::to_voigt(s) * gp.weight;
                    for i in 0..8 {
                        ae[(i, j)] += col[i];
                    }
                }
            }
            Ok(ae)
        })
        .collect::<Result<_, _>>()?;
    let mut a = DMatrix::zeros(mesh.n_gdof(), n_phi);
    for (e, ae) in parts.iter().enumerate() {
        let dofs = mesh.element_dofs(e);
        for i in 0..8 {
            for j in 0..n_phi {
                a[(dofs[i], j)] += ae[(i, j)];
            }
        }
    }
    Ok(FeatureMatrix { a, free_rows: mesh.free_dofs(), library: library.clone() })
}

impl FeatureMatrix {
    /// Restricts to the free rows against the matching external-force entries.
    pub fn regression_problem(&self, f_ext: &DVector<f64>) -> RegressionProblem {
        let rows = &self.free_rows;
        let a = DMatrix::from_fn(rows.len(), self.a.ncols(), |r, c| self.a[(rows[r], c)]);
        let p = DVector::from_iterator(rows.len(), rows.iter().map(|&r| f_ext[r]));
        RegressionProblem { a, p, library: self.library.clone() }
    }
}

/// Least-squares system `A κ ≈ p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionProblem {
    pub a: DMatrix<f64>,
    pub p: DVector<f64>,
    pub library: FeatureLibrary,
}

impl RegressionProblem {
    pub fn n_rows(&self) -> usize {
        self.p.len()
    }

    /// `sqrt(‖p − A κ‖² / n_rows)`
    pub fn rmse(&self, kappa: &DVector<f64>) -> f64 {
        ((&self.p - &self.a * kappa).norm_squared() / self.n_rows() as f64).sqrt()
    }

    /// Multiplies `A` and `p` by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        RegressionProblem { a: &self.a * s, p: &self.p * s, library: self.library.clone() }
    }

    /// Rescales so that the zero model has RMSE `reference`, giving the admissibility
    /// threshold and λ-range a fixed meaning independent of geometry and load units.
    pub fn normalized(&self, reference: f64) -> (Self, f64) {
        let r0 = self.rmse(&DVector::zeros(self.a.ncols()));
        let s = if r0 > 0.0 { reference / r0 } else { 1.0 };
        (self.scaled(s), s)
    }
}

/// Linear volumetric constraint `Σ B_k = r Σ A_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumetricConstraint {
    pub r: f64,
}

impl VolumetricConstraint {
    /// Constraint normal `c` with `cᵀκ = Σ B − r Σ A`.
    pub fn normal(&self, library: &FeatureLibrary) -> DVector<f64> {
        DVector::from_iterator(
            library.n_phi(),
            library.features().iter().map(|f| if f.is_volumetric() { 1.0 } else { -self.r }),
        )
    }
}

/// Solution of one penalized problem plus its optimality report.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSolution {
    pub kappa: DVector<f64>,
    pub kkt: KktReport,
}

/// Column scaling and constraint elimination shared along a λ-path.
struct Prepared {
    /// `κ = T z`
    t: DMatrix<f64>,
    /// `G = 2 (A T)ᵀ (A T)`
    g: DMatrix<f64>,
    /// `-2 (A T)ᵀ p`
    h0: DVector<f64>,
    /// `λ`-multiplier of each `z` entry: `1ᵀ T`.
    w: DVector<f64>,
    /// Remaining equality normal in `z` coordinates.
    c: Option<DVector<f64>>,
}

impl Prepared {
    fn new(problem: &RegressionProblem, constraint: Option<VolumetricConstraint>) -> Result<Self, EuclidError> {
        let lib = &problem.library;
        let n = lib.n_phi();
        let vol = lib.vol_indices();
        let iso = lib.iso_indices();
        // elimination basis
        let (mut t, c) = match constraint {
            Some(vc) if vc.r <= 0.0 => return Err(EuclidError::Invalid(format!("r = {} must be positive", vc.r))),
            Some(vc) if vol.len() == 1 && !iso.is_empty() => {
                // z = iso coefficients, B1 = r Σ z
                let mut t = DMatrix::zeros(n, iso.len());
                for (k, &i) in iso.iter().enumerate() {
                    t[(i, k)] = 1.0;
                    t[(vol[0], k)] = vc.r;
                }
                (t, None)
            }
            Some(vc) => (DMatrix::identity(n, n), Some(vc.normal(lib))),
            None => (DMatrix::identity(n, n), None),
        };
        // unit-norm columns in z coordinates
        let at = &problem.a * &t;
        for k in 0..t.ncols() {
            let norm = at.column(k).norm();
            if norm > 0.0 {
                t.column_mut(k).scale_mut(1.0 / norm);
            }
        }
        let at = &problem.a * &t;
        let g = at.transpose() * &at * 2.0;
        let h0 = at.transpose() * &problem.p * -2.0;
        let w = t.row_sum().transpose();
        let c = c.map(|c| t.transpose() * c);
        Ok(Prepared { t, g, h0, w, c })
    }

    fn solve(&self, lambda: f64, z0: Option<&DVector<f64>>, tol: f64) -> Result<(DVector<f64>, KktReport), QpError> {
        let h = &self.h0 + &self.w * lambda;
        match &self.c {
            None => {
                let z = qp::solve_nonneg_qp(&self.g, &h, z0, tol)?;
                Ok((z.clone(), qp::kkt_report(&self.g, &h, None, &z)))
            }
            Some(c) => {
                let (z, nu) = qp::solve_nonneg_qp_eq(&self.g, &h, c, z0, tol)?;
                Ok((z.clone(), qp::kkt_report(&self.g, &h, Some((c, nu)), &z)))
            }
        }
    }

    fn kappa(&self, z: &DVector<f64>) -> DVector<f64> {
        // exact zeros stay exact through the substitution
        &self.t * z
    }
}

const QP_TOL: f64 = 1e-13;

/// Minimizes `‖A κ − p‖² + λ 1ᵀκ` over `κ ≥ 0`, optionally with the volumetric constraint.
pub fn solve_constrained_lasso(
    problem: &RegressionProblem,
    lambda: f64,
    constraint: Option<VolumetricConstraint>,
) -> Result<LassoSolution, EuclidError> {
    if !(lambda >= 0.0) {
        return Err(EuclidError::Invalid(format!("lambda = {lambda} must be nonnegative")));
    }
    let prep = Prepared::new(problem, constraint)?;
    let (z, kkt) = prep.solve(lambda, None, QP_TOL).map_err(|source| EuclidError::Qp { lambda, source })?;
    Ok(LassoSolution { kappa: prep.kappa(&z), kkt })
}

/// One point of the λ-path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub lambda: f64,
    pub kappa: Vec<f64>,
    pub rmse: f64,
    pub l1_norm: f64,
    pub n_active: usize,
    #[serde(skip)]
    pub kkt: KktReport,
}

impl ParetoPoint {
    fn new(problem: &RegressionProblem, lambda: f64, kappa: DVector<f64>, kkt: KktReport) -> Self {
        ParetoPoint {
            lambda,
            rmse: problem.rmse(&kappa),
            l1_norm: kappa.iter().map(|v| v.abs()).sum(),
            n_active: kappa.iter().filter(|&&v| v > ACTIVE_THRESHOLD).count(),
            kappa: kappa.as_slice().to_vec(),
            kkt,
        }
    }

    pub fn active_set(&self) -> Vec<usize> {
        (0..self.kappa.len()).filter(|&j| self.kappa[j] > ACTIVE_THRESHOLD).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EuclidSettings {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub n_lambda: usize,
    /// Admissibility threshold on the normalized RMSE.
    pub tau: f64,
    /// Volumetric multiplier `r`.
    pub r: f64,
    /// Enforce `Σ B = r Σ A`.
    pub volumetric_constraint: bool,
    /// RMSE of the zero model after normalization.
    pub reference_rmse: f64,
    /// Solve the path sequentially with warm starts, else cold starts in parallel.
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

fn default_true() -> bool {
    true
}

impl Default for EuclidSettings {
    fn default() -> Self {
        EuclidSettings {
            lambda_min: 1e-2,
            lambda_max: 1e10,
            n_lambda: 1000,
            tau: 70.0,
            r: 3.0,
            volumetric_constraint: true,
            reference_rmse: 1000.0,
            warm_start: true,
        }
    }
}

impl EuclidSettings {
    pub fn constraint(&self) -> Option<VolumetricConstraint> {
        self.volumetric_constraint.then_some(VolumetricConstraint { r: self.r })
    }

    pub fn validate(&self) -> Result<(), EuclidError> {
        if !(self.lambda_min > 0.0 && self.lambda_min < self.lambda_max) {
            return Err(EuclidError::Invalid("need 0 < lambda_min < lambda_max".into()));
        }
        if self.n_lambda < 2 {
            return Err(EuclidError::Invalid("n_lambda must be at least 2".into()));
        }
        if !(self.tau > 0.0 && self.reference_rmse > 0.0 && self.r > 0.0) {
            return Err(EuclidError::Invalid("tau, r and reference_rmse must be positive".into()));
        }
        Ok(())
    }
}

/// `n` logarithmically spaced values from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)
            }
        })
        .collect()
}

/// Solves the penalized problem at every λ of the path, returned in increasing λ.
pub fn lambda_path(problem: &RegressionProblem, settings: &EuclidSettings) -> Result<Vec<ParetoPoint>, EuclidError> {
    settings.validate()?;
    let lambdas = logspace(settings.lambda_min, settings.lambda_max, settings.n_lambda);
    let prep = Prepared::new(problem, settings.constraint())?;
    let solve = |lambda: f64, z0: Option<&DVector<f64>>| {
        prep.solve(lambda, z0, QP_TOL).map_err(|source| EuclidError::Qp { lambda, source })
    };
    if settings.warm_start {
        // homotopy from the empty model at large λ toward small λ
        let mut out = Vec::with_capacity(lambdas.len());
        let mut z: Option<DVector<f64>> = None;
        for &lambda in lambdas.iter().rev() {
            let (zl, kkt) = solve(lambda, z.as_ref())?;
            out.push(ParetoPoint::new(problem, lambda, prep.kappa(&zl), kkt));
            z = Some(zl);
        }
        out.reverse();
        Ok(out)
    } else {
        lambdas
            .par_iter()
            .map(|&lambda| solve(lambda, None).map(|(z, kkt)| ParetoPoint::new(problem, lambda, prep.kappa(&z), kkt)))
            .collect()
    }
}

/// Selected model with the path it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredModel {
    pub kappa_star: MaterialParams,
    pub lambda_star: f64,
    pub active_set: Vec<usize>,
    pub rmse_star: f64,
    /// Rows of the regression system (the RMSE normalization).
    pub n_rows: usize,
    /// Factor applied to `A` and `p` before regression.
    pub scale: f64,
    #[serde(skip)]
    pub pareto_path: Vec<ParetoPoint>,
}

impl DiscoveredModel {
    /// Human-readable strain energy, e.g. `0.499*(J1-3) + 1.498*(J3-1)^2`.
    pub fn expression(&self) -> String {
        format_energy(&self.kappa_star)
    }
}

/// Terms in library order; coefficients at or below the active threshold are omitted.
pub fn format_energy(params: &MaterialParams) -> String {
    let pow = |base: &str, e: u32| match e {
        0 => None,
        1 => Some(format!("({base})")),
        e => Some(format!("({base})^{e}")),
    };
    let terms: Vec<String> = params
        .library
        .features()
        .iter()
        .zip(params.kappa.iter())
        .filter(|(_, &k)| k > ACTIVE_THRESHOLD)
        .map(|(f, k)| {
            let body = match *f {
                constitutive::Feature::Isochoric { i, j } => [pow("J1-3", i), pow("J2-3", j)]
                    .into_iter()
                    .flatten()
                    .collect::<Vec<_>>()
                    .join("*"),
                constitutive::Feature::Volumetric { k } => pow("J3-1", 2 * k).expect("positive exponent"),
            };
            format!("{k:.3}*{body}")
        })
        .collect();
    if terms.is_empty() {
        "0".into()
    } else {
        terms.join(" + ")
    }
}

/// Admissible set (`rmse < τ`), then fewest active terms, then smallest RMSE;
/// exact RMSE ties go to the larger λ.
pub fn select_model(
    path: &[ParetoPoint],
    tau: f64,
    library: &FeatureLibrary,
) -> Result<(usize, ParetoPoint), EuclidError> {
    let admissible: Vec<usize> = (0..path.len()).filter(|&i| path[i].rmse < tau).collect();
    if admissible.is_empty() {
        let best = path.iter().map(|p| p.rmse).fold(f64::INFINITY, f64::min);
        return Err(EuclidError::NoAdmissibleModel { best_rmse: best, tau });
    }
    let n_min = admissible.iter().map(|&i| path[i].n_active).min().expect("nonempty");
    let mut best: Option<usize> = None;
    for &i in admissible.iter().filter(|&&i| path[i].n_active == n_min) {
        best = match best {
            None => Some(i),
            Some(b) => {
                let (pi, pb) = (&path[i], &path[b]);
                if pi.rmse < pb.rmse || (pi.rmse == pb.rmse && pi.lambda > pb.lambda) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let i = best.expect("nonempty");
    debug_assert_eq!(path[i].kappa.len(), library.n_phi());
    Ok((i, path[i].clone()))
}

/// Full discovery on a regression problem: normalize, sweep λ, select.
pub fn discover(problem: &RegressionProblem, settings: &EuclidSettings) -> Result<DiscoveredModel, EuclidError> {
    let (scaled, scale) = problem.normalized(settings.reference_rmse);
    let path = lambda_path(&scaled, settings)?;
    let (_, point) = select_model(&path, settings.tau, &problem.library)?;
    let kappa = DVector::from_vec(point.kappa.clone());
    Ok(DiscoveredModel {
        kappa_star: MaterialParams::new(problem.library.clone(), kappa).expect("path uses the problem library"),
        lambda_star: point.lambda,
        active_set: point.active_set(),
        rmse_star: point.rmse,
        n_rows: problem.n_rows(),
        scale,
        pareto_path: path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_plate_with_hole;
    use crate::solver::{external_force, internal_force, LoadCase, Material, SolverSettings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn point(lambda: f64, rmse: f64, n_active: usize) -> ParetoPoint {
        let mut kappa = vec![0.0; 10];
        for k in kappa.iter_mut().take(n_active) {
            *k = 1.0;
        }
        ParetoPoint { lambda, kappa, rmse, l1_norm: n_active as f64, n_active, kkt: KktReport::default() }
    }

    #[test]
    fn zero_displacement_gives_zero_matrix() {
        let m = build_plate_with_hole(1.0, 1.0, 0.25, 1).unwrap();
        let fm = assemble_feature_matrix(&m, &DVector::zeros(m.n_gdof()), &FeatureLibrary::default()).unwrap();
        assert_eq!(fm.a.ncols(), 10);
        assert_eq!(fm.a.norm(), 0.0);
    }

    #[test]
    fn feature_matrix_reproduces_internal_force() {
        let m = build_plate_with_hole(1.0, 1.0, 0.25, 1).unwrap();
        let lib = FeatureLibrary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let u = DVector::from_fn(m.n_gdof(), |_, _| rng.random_range(-0.02..0.02));
            let k = DVector::from_fn(10, |_, _| rng.random_range(0.0..1.0));
            let fm = assemble_feature_matrix(&m, &u, &lib).unwrap();
            let mat: Material = MaterialParams::new(lib.clone(), k.clone()).unwrap().into();
            let fi = internal_force(&m, &u, &mat).unwrap();
            assert!((&fm.a * &k - &fi).norm() <= 1e-10 * fi.norm());
        }
    }

    #[test]
    fn large_lambda_gives_empty_model() {
        let (prob, _) = nh_problem();
        let (scaled, _) = prob.normalized(1000.0);
        for c in [None, Some(VolumetricConstraint { r: 3.0 })] {
            let sol = solve_constrained_lasso(&scaled, 1e10, c).unwrap();
            assert!(sol.kappa.iter().all(|&v| v == 0.0));
        }
    }

    fn nh_problem() -> (RegressionProblem, MaterialParams) {
        let m = build_plate_with_hole(1.0, 1.0, 0.25, 1).unwrap();
        let truth = MaterialParams::neo_hookean(FeatureLibrary::default()).unwrap();
        let load = LoadCase::uniaxial(0.5, 1.0);
        let u = solver::solve_forward(&m, &truth.clone().into(), &load, &SolverSettings::default()).unwrap();
        let fm = assemble_feature_matrix(&m, &u.u, &truth.library).unwrap();
        (fm.regression_problem(&external_force(&m, &load)), truth)
    }

    #[test]
    fn unpenalized_fit_recovers_truth_and_respects_constraint() {
        let (prob, truth) = nh_problem();
        let vc = VolumetricConstraint { r: 3.0 };
        let sol = solve_constrained_lasso(&prob.normalized(1000.0).0, 0.0, Some(vc)).unwrap();
        assert!(vc.normal(&prob.library).dot(&sol.kappa).abs() < 1e-10);
        // truth is exactly feasible and exactly fits the data
        assert!(prob.rmse(&truth.kappa) < 1e-9);
        assert!(sol.kkt.complementarity < 1e-7);
    }

    #[test]
    fn scale_invariance_of_unpenalized_argmin() {
        let (prob, _) = nh_problem();
        let a = solve_constrained_lasso(&prob, 0.0, None).unwrap();
        let b = solve_constrained_lasso(&prob.scaled(37.0), 0.0, None).unwrap();
        assert!((&a.kappa - &b.kappa).norm() <= 1e-6 * a.kappa.norm());
    }

    #[test]
    fn selection_rules() {
        let lib = FeatureLibrary::default();
        let path = vec![point(1.0, 10.0, 3), point(2.0, 10.0, 2), point(3.0, 100.0, 1)];
        let (i, p) = select_model(&path, 70.0, &lib).unwrap();
        assert_eq!((i, p.n_active), (1, 2));
        let single = vec![point(1.0, 50.0, 4), point(2.0, 80.0, 2)];
        assert_eq!(select_model(&single, 70.0, &lib).unwrap().0, 0);
        let tie = vec![point(1.0, 5.0, 2), point(4.0, 5.0, 2), point(2.0, 6.0, 2)];
        assert_eq!(select_model(&tie, 70.0, &lib).unwrap().0, 1);
        match select_model(&[point(1.0, 90.0, 1)], 70.0, &lib) {
            Err(EuclidError::NoAdmissibleModel { best_rmse, .. }) => assert_eq!(best_rmse, 90.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn logspace_endpoints() {
        let l = logspace(1e-2, 1e10, 1000);
        assert_eq!(l.len(), 1000);
        assert!((l[0] - 1e-2).abs() < 1e-16);
        assert_eq!(l[999], 1e10);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn expression_formatting() {
        let p = MaterialParams::from_named(FeatureLibrary::default(), &[("A10", 0.4991), ("A21", 0.01), ("B1", 1.498), ("A02", 1e-12)]).unwrap();
        assert_eq!(format_energy(&p), "0.499*(J1-3) + 0.010*(J1-3)^2*(J2-3) + 1.498*(J3-1)^2");
        assert_eq!(format_energy(&MaterialParams::zeros(FeatureLibrary::default())), "0");
    }
}

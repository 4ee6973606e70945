//! Generalized Mooney–Rivlin feature library in modified invariants, with
//! second Piola–Kirchhoff stress and material tangent by term-wise chain rule.
//!
//! In-plane symmetric tensors use the Voigt order `[11, 22, 12]` storing tensor
//! components. Fourth-order tensors are 3×3 Voigt matrices of tensor components
//! `D[a][b] = D_ijkl`, so `dS = D * [dE11, dE22, 2 dE12]`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DVector, Matrix2, Matrix3, Vector3};
use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MAX_N_MR: usize = 5;
pub const MAX_N_VOL: usize = 2;

const VOIGT: [(usize, usize); 3] = [(0, 0), (1, 1), (0, 1)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstitutiveError {
    #[error("inverted deformation: det F = {0:e}")]
    InvertedElement(f64),
    #[error("library mismatch: expected {expected} coefficients, got {got}")]
    LibraryMismatch { expected: usize, got: usize },
    #[error("invalid library order N_MR = {n_mr}, N_vol = {n_vol}")]
    InvalidLibrary { n_mr: usize, n_vol: usize },
    #[error("Poisson ratio {0} outside (-1, 0.5)")]
    InvalidPoisson(f64),
    #[error("Young's modulus {0} must be positive")]
    InvalidModulus(f64),
    #[error("unknown coefficient name '{0}'")]
    UnknownCoefficient(String),
    #[error("negative coefficient {name} = {value}")]
    NegativeCoefficient { name: String, value: f64 },
}

/// One strain-energy basis function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// `(J1 - 3)^i (J2 - 3)^j`
    Isochoric { i: u32, j: u32 },
    /// `(J3 - 1)^(2k)`
    Volumetric { k: u32 },
}

impl Feature {
    pub fn name(&self) -> String {
        match self {
            Feature::Isochoric { i, j } => format!("A{i}{j}"),
            Feature::Volumetric { k } => format!("B{k}"),
        }
    }

    pub fn is_volumetric(&self) -> bool {
        matches!(self, Feature::Volumetric { .. })
    }
}

/// Ordered set of features.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LibraryDescriptor", into = "LibraryDescriptor")]
pub struct FeatureLibrary {
    n_mr: usize,
    n_vol: usize,
    features: Vec<Feature>,
}

#[derive(Serialize, Deserialize)]
struct LibraryDescriptor {
    n_mr: usize,
    n_vol: usize,
    features: Vec<Feature>,
}

impl TryFrom<LibraryDescriptor> for FeatureLibrary {
    type Error = ConstitutiveError;
    fn try_from(d: LibraryDescriptor) -> Result<Self, Self::Error> {
        let lib = FeatureLibrary::new(d.n_mr, d.n_vol)?;
        if lib.features != d.features {
            return Err(ConstitutiveError::InvalidLibrary { n_mr: d.n_mr, n_vol: d.n_vol });
        }
        Ok(lib)
    }
}

impl From<FeatureLibrary> for LibraryDescriptor {
    fn from(l: FeatureLibrary) -> Self {
        LibraryDescriptor { n_mr: l.n_mr, n_vol: l.n_vol, features: l.features }
    }
}

impl Default for FeatureLibrary {
    fn default() -> Self {
        FeatureLibrary::new(3, 1).expect("default library is valid")
    }
}

impl FeatureLibrary {
    /// Isochoric terms by increasing total degree, `i` descending within a degree,
    /// followed by volumetric terms.
    pub fn new(n_mr: usize, n_vol: usize) -> Result<Self, ConstitutiveError> {
        if n_mr > MAX_N_MR || n_vol > MAX_N_VOL || n_mr + n_vol == 0 {
            return Err(ConstitutiveError::InvalidLibrary { n_mr, n_vol });
        }
        let mut features = Vec::new();
        for deg in 1..=n_mr as u32 {
            for i in (0..=deg).rev() {
                features.push(Feature::Isochoric { i, j: deg - i });
            }
        }
        for k in 1..=n_vol as u32 {
            features.push(Feature::Volumetric { k });
        }
        Ok(FeatureLibrary { n_mr, n_vol, features })
    }

    pub fn n_mr(&self) -> usize {
        self.n_mr
    }

    pub fn n_vol(&self) -> usize {
        self.n_vol
    }

    pub fn n_phi(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(Feature::name).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name() == name)
    }

    pub fn iso_indices(&self) -> Vec<usize> {
        (0..self.n_phi()).filter(|&i| !self.features[i].is_volumetric()).collect()
    }

    pub fn vol_indices(&self) -> Vec<usize> {
        (0..self.n_phi()).filter(|&i| self.features[i].is_volumetric()).collect()
    }
}

/// Coefficient vector over a feature library (MPa).
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialParams {
    pub kappa: DVector<f64>,
    pub library: FeatureLibrary,
}

impl MaterialParams {
    pub fn new(library: FeatureLibrary, kappa: DVector<f64>) -> Result<Self, ConstitutiveError> {
        if kappa.len() != library.n_phi() {
            return Err(ConstitutiveError::LibraryMismatch { expected: library.n_phi(), got: kappa.len() });
        }
        Ok(MaterialParams { kappa, library })
    }

    pub fn zeros(library: FeatureLibrary) -> Self {
        let n = library.n_phi();
        MaterialParams { kappa: DVector::zeros(n), library }
    }

    /// Builds parameters from named coefficients; unnamed entries are zero.
    pub fn from_named(library: FeatureLibrary, named: &[(&str, f64)]) -> Result<Self, ConstitutiveError> {
        let mut p = MaterialParams::zeros(library);
        for (name, v) in named {
            let i = p
                .library
                .index_of(name)
                .ok_or_else(|| ConstitutiveError::UnknownCoefficient(name.to_string()))?;
            p.kappa[i] = *v;
        }
        Ok(p)
    }

    /// Neo-Hookean truth model `A10 = 0.5, B1 = 1.5`.
    pub fn neo_hookean(library: FeatureLibrary) -> Result<Self, ConstitutiveError> {
        Self::from_named(library, &[("A10", 0.5), ("B1", 1.5)])
    }

    /// Mooney–Rivlin truth model `A10 = 0.3, A01 = 0.2, B1 = 1.5`.
    pub fn mooney_rivlin(library: FeatureLibrary) -> Result<Self, ConstitutiveError> {
        Self::from_named(library, &[("A10", 0.3), ("A01", 0.2), ("B1", 1.5)])
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.library.index_of(name).map(|i| self.kappa[i])
    }

    pub fn named(&self) -> Vec<(String, f64)> {
        self.library.names().into_iter().zip(self.kappa.iter().copied()).collect()
    }

    /// Rejects negative entries.
    pub fn check_nonnegative(&self) -> Result<(), ConstitutiveError> {
        for (name, value) in self.named() {
            if value < 0.0 {
                return Err(ConstitutiveError::NegativeCoefficient { name, value });
            }
        }
        Ok(())
    }
}

impl Serialize for MaterialParams {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let named = self.named();
        let mut map = s.serialize_map(Some(named.len()))?;
        for (k, v) in &named {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for MaterialParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = MaterialParams;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of coefficient names (A10, A01, ..., B1, ...) to values")
            }
            fn visit_map<M: MapAccess<'de>>(self, mut m: M) -> Result<Self::Value, M::Error> {
                let mut entries: BTreeMap<String, f64> = BTreeMap::new();
                while let Some((k, v)) = m.next_entry::<String, f64>()? {
                    entries.insert(k, v);
                }
                params_from_map(&entries).map_err(de::Error::custom)
            }
        }
        d.deserialize_map(V)
    }
}

/// Infers the smallest library covering every named coefficient.
pub fn params_from_map(entries: &BTreeMap<String, f64>) -> Result<MaterialParams, ConstitutiveError> {
    let mut n_mr = 0;
    let mut n_vol = 0;
    for name in entries.keys() {
        let bad = || ConstitutiveError::UnknownCoefficient(name.clone());
        let digits = name.get(1..).ok_or_else(bad)?;
        match name.chars().next() {
            Some('A') if digits.len() == 2 => {
                let i = digits[..1].parse::<usize>().map_err(|_| bad())?;
                let j = digits[1..].parse::<usize>().map_err(|_| bad())?;
                if i + j == 0 {
                    return Err(bad());
                }
                n_mr = n_mr.max(i + j);
            }
            Some('B') => {
                let k = digits.parse::<usize>().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                n_vol = n_vol.max(k);
            }
            _ => return Err(bad()),
        }
    }
    let lib = FeatureLibrary::new(n_mr, n_vol)?;
    let named: Vec<(&str, f64)> = entries.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    MaterialParams::from_named(lib, &named)
}

/// Plane-strain kinematic state at a material point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationState {
    pub f: Matrix2<f64>,
    pub c: Matrix2<f64>,
    pub e: Matrix2<f64>,
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
}

impl DeformationState {
    pub fn from_f(f: Matrix2<f64>) -> Result<Self, ConstitutiveError> {
        let det = f.determinant();
        if !(det > 0.0) {
            return Err(ConstitutiveError::InvertedElement(det));
        }
        let c = f.transpose() * f;
        let e = 0.5 * (c - Matrix2::identity());
        let i1 = c[(0, 0)] + c[(1, 1)] + 1.0;
        let tr_c2 = c[(0, 0)].powi(2) + c[(1, 1)].powi(2) + 2.0 * c[(0, 1)] * c[(1, 0)] + 1.0;
        let i2 = 0.5 * (i1 * i1 - tr_c2);
        // det C = det(F)^2, exact in the embedding
        let i3 = det * det;
        Ok(DeformationState {
            f,
            c,
            e,
            i1,
            i2,
            i3,
            j1: i1 * i3.powf(-1.0 / 3.0),
            j2: i2 * i3.powf(-2.0 / 3.0),
            j3: det,
        })
    }

    pub fn identity() -> Self {
        Self::from_f(Matrix2::identity()).expect("identity is admissible")
    }
}

/// Modified invariants `(J1, J2, J3)` of `C = FᵀF` with `F33 = 1`.
pub fn modified_invariants(f: &Matrix2<f64>) -> Result<(f64, f64, f64), ConstitutiveError> {
    let s = DeformationState::from_f(*f)?;
    Ok((s.j1, s.j2, s.j3))
}

/// First and second derivatives of `J1..J3` with respect to `E`.
#[derive(Debug, Clone, Copy)]
pub struct InvariantDerivatives {
    /// `dJ_k/dE` (in-plane block), k = 1..3.
    pub first: [Matrix2<f64>; 3],
    /// `d²J_k/dE²` in Voigt form.
    pub second: [Matrix3<f64>; 3],
}

fn outer(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|p, q| {
        let (i, j) = VOIGT[p];
        let (k, l) = VOIGT[q];
        a[(i, j)] * b[(k, l)]
    })
}

/// `(A ⊙ B)_ijkl = ½ (A_ik B_jl + A_il B_jk)`
fn odot(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|p, q| {
        let (i, j) = VOIGT[p];
        let (k, l) = VOIGT[q];
        0.5 * (a[(i, k)] * b[(j, l)] + a[(i, l)] * b[(j, k)])
    })
}

pub fn to_voigt(t: &Matrix2<f64>) -> Vector3<f64> {
    Vector3::new(t[(0, 0)], t[(1, 1)], 0.5 * (t[(0, 1)] + t[(1, 0)]))
}

pub fn from_voigt(v: &Vector3<f64>) -> Matrix2<f64> {
    Matrix2::new(v[0], v[2], v[2], v[1])
}

pub fn invariant_derivatives(state: &DeformationState) -> InvariantDerivatives {
    let id = Matrix2::identity();
    let ci = state
        .c
        .try_inverse()
        .expect("C is invertible for admissible states");
    let (i1, i2) = (state.i1, state.i2);
    let a = state.i3.powf(-1.0 / 3.0);
    let b = state.i3.powf(-2.0 / 3.0);

    // derivatives with respect to C
    let d1 = a * (id - (i1 / 3.0) * ci);
    let t2 = i1 * id - state.c - (2.0 / 3.0) * i2 * ci;
    let d2 = b * t2;
    let d3 = 0.5 * state.j3 * ci;

    let ici = outer(&id, &ci);
    let cii = outer(&ci, &id);
    let cici = outer(&ci, &ci);
    let ci_odot = odot(&ci, &ci);
    let sym_id = odot(&id, &id);

    let h1 = a * (-(ici + cii) / 3.0 + (i1 / 9.0) * cici + (i1 / 3.0) * ci_odot);
    let h2 = b
        * (-(2.0 / 3.0) * outer(&t2, &ci) + outer(&id, &id) - sym_id
            - (2.0 / 3.0) * outer(&ci, &(i1 * id - state.c))
            + (2.0 / 3.0) * i2 * ci_odot);
    let h3 = state.j3 * (0.25 * cici - 0.5 * ci_odot);

    InvariantDerivatives {
        first: [2.0 * d1, 2.0 * d2, 2.0 * d3],
        second: [4.0 * h1, 4.0 * h2, 4.0 * h3],
    }
}

/// `x^n` with `x^0 = 1` and negative exponents mapped to zero.
fn pw(x: f64, n: i64) -> f64 {
    if n < 0 {
        0.0
    } else {
        x.powi(n as i32)
    }
}

/// Value, gradient and Hessian of a feature with respect to `(J1, J2, J3)`.
fn feature_jets(feature: &Feature, s: &DeformationState) -> (f64, [f64; 3], [[f64; 3]; 3]) {
    let mut g = [0.0; 3];
    let mut h = [[0.0; 3]; 3];
    match *feature {
        Feature::Isochoric { i, j } => {
            let (i, j) = (i as i64, j as i64);
            let (x, y) = (s.j1 - 3.0, s.j2 - 3.0);
            let (fi, fj) = (i as f64, j as f64);
            let v = pw(x, i) * pw(y, j);
            g[0] = fi * pw(x, i - 1) * pw(y, j);
            g[1] = fj * pw(x, i) * pw(y, j - 1);
            h[0][0] = fi * (fi - 1.0) * pw(x, i - 2) * pw(y, j);
            h[1][1] = fj * (fj - 1.0) * pw(x, i) * pw(y, j - 2);
            h[0][1] = fi * fj * pw(x, i - 1) * pw(y, j - 1);
            h[1][0] = h[0][1];
            (v, g, h)
        }
        Feature::Volumetric { k } => {
            let n = 2 * k as i64;
            let z = s.j3 - 1.0;
            let fnn = n as f64;
            g[2] = fnn * pw(z, n - 1);
            h[2][2] = fnn * (fnn - 1.0) * pw(z, n - 2);
            (pw(z, n), g, h)
        }
    }
}

/// Feature values in library order.
pub fn evaluate_features(state: &DeformationState, library: &FeatureLibrary) -> DVector<f64> {
    DVector::from_iterator(
        library.n_phi(),
        library.features().iter().map(|f| feature_jets(f, state).0),
    )
}

/// Feature values at given modified invariants.
pub fn evaluate_features_at(j1: f64, j2: f64, j3: f64, library: &FeatureLibrary) -> DVector<f64> {
    let s = DeformationState {
        f: Matrix2::identity(),
        c: Matrix2::identity(),
        e: Matrix2::zeros(),
        i1: 0.0,
        i2: 0.0,
        i3: 0.0,
        j1,
        j2,
        j3,
    };
    evaluate_features(&s, library)
}

fn check_library(params: &MaterialParams) -> Result<(), ConstitutiveError> {
    if params.kappa.len() != params.library.n_phi() {
        return Err(ConstitutiveError::LibraryMismatch {
            expected: params.library.n_phi(),
            got: params.kappa.len(),
        });
    }
    Ok(())
}

pub fn strain_energy(state: &DeformationState, params: &MaterialParams) -> Result<f64, ConstitutiveError> {
    check_library(params)?;
    Ok(params.kappa.dot(&evaluate_features(state, &params.library)))
}

/// `dφ_j/dE` for every feature, in library order.
pub fn feature_stresses(state: &DeformationState, library: &FeatureLibrary) -> Vec<Matrix2<f64>> {
    let d = invariant_derivatives(state);
    library
        .features()
        .iter()
        .map(|f| {
            let (_, g, _) = feature_jets(f, state);
            g[0] * d.first[0] + g[1] * d.first[1] + g[2] * d.first[2]
        })
        .collect()
}

/// Stress and tangent contributions of every feature, sharing one derivative evaluation.
pub fn feature_stress_tangents(
    state: &DeformationState,
    library: &FeatureLibrary,
) -> Vec<(Matrix2<f64>, Matrix3<f64>)> {
    stress_tangents_of(state, library.features().iter())
}

fn stress_tangents_of<'a>(
    state: &DeformationState,
    features: impl Iterator<Item = &'a Feature>,
) -> Vec<(Matrix2<f64>, Matrix3<f64>)> {
    let d = invariant_derivatives(state);
    let dv: [Vector3<f64>; 3] = std::array::from_fn(|k| to_voigt(&d.first[k]));
    features
        .map(|f| {
            let (_, g, h) = feature_jets(f, state);
            let mut s = Matrix2::zeros();
            let mut t = Matrix3::zeros();
            for m in 0..3 {
                if g[m] != 0.0 {
                    s += g[m] * d.first[m];
                    t += g[m] * d.second[m];
                }
                for n in 0..3 {
                    if h[m][n] != 0.0 {
                        t += h[m][n] * dv[m] * dv[n].transpose();
                    }
                }
            }
            (s, t)
        })
        .collect()
}

pub fn second_pk_stress(state: &DeformationState, params: &MaterialParams) -> Result<Matrix2<f64>, ConstitutiveError> {
    check_library(params)?;
    Ok(feature_stresses(state, &params.library)
        .iter()
        .zip(params.kappa.iter())
        .filter(|(_, k)| **k != 0.0)
        .fold(Matrix2::zeros(), |acc, (s, k)| acc + *k * s))
}

/// Second PK stress and Voigt tangent in one pass, skipping zero coefficients.
pub fn stress_and_tangent(
    state: &DeformationState,
    params: &MaterialParams,
) -> Result<(Matrix2<f64>, Matrix3<f64>), ConstitutiveError> {
    check_library(params)?;
    let active: Vec<usize> = (0..params.kappa.len()).filter(|&i| params.kappa[i] != 0.0).collect();
    let mut s = Matrix2::zeros();
    let mut d = Matrix3::zeros();
    if active.is_empty() {
        return Ok((s, d));
    }
    let feats = params.library.features();
    let parts = stress_tangents_of(state, active.iter().map(|&i| &feats[i]));
    for (&i, (fs, ft)) in active.iter().zip(parts) {
        s += params.kappa[i] * fs;
        d += params.kappa[i] * ft;
    }
    Ok((s, d))
}

pub fn material_tangent(state: &DeformationState, params: &MaterialParams) -> Result<Matrix3<f64>, ConstitutiveError> {
    Ok(stress_and_tangent(state, params)?.1)
}

/// Plane-strain isotropic elasticity matrix (Voigt, engineering shear strain).
pub fn linear_elastic_matrix(e: f64, nu: f64) -> Result<Matrix3<f64>, ConstitutiveError> {
    if !(e > 0.0) {
        return Err(ConstitutiveError::InvalidModulus(e));
    }
    if !(nu > -1.0 && nu < 0.5) {
        return Err(ConstitutiveError::InvalidPoisson(nu));
    }
    let c = e / ((1.0 + nu) * (1.0 - 2.0 * nu));
    Ok(c * Matrix3::new(
        1.0 - nu,
        nu,
        0.0,
        nu,
        1.0 - nu,
        0.0,
        0.0,
        0.0,
        0.5 * (1.0 - 2.0 * nu),
    ))
}

/// Plane-strain Hooke's law for a symmetric small-strain tensor.
pub fn linear_elastic_stress(strain: &Matrix2<f64>, e: f64, nu: f64) -> Result<Matrix2<f64>, ConstitutiveError> {
    let d = linear_elastic_matrix(e, nu)?;
    let eps = Vector3::new(strain[(0, 0)], strain[(1, 1)], strain[(0, 1)] + strain[(1, 0)]);
    Ok(from_voigt(&(d * eps)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn nh() -> MaterialParams {
        MaterialParams::neo_hookean(FeatureLibrary::default()).unwrap()
    }

    fn full_random(seed: &[f64]) -> MaterialParams {
        let lib = FeatureLibrary::default();
        let k = DVector::from_iterator(lib.n_phi(), seed.iter().cycle().take(lib.n_phi()).map(|x| x.abs()));
        MaterialParams::new(lib, k).unwrap()
    }

    /// W as a function of independent (E11, E22, E12) with E21 = E12.
    fn energy_of_e(e: &Vector3<f64>, params: &MaterialParams) -> f64 {
        let c = Matrix2::identity() + 2.0 * from_voigt(e);
        // any F with FᵀF = C works; take the symmetric square root
        let f = sym_sqrt(&c);
        strain_energy(&DeformationState::from_f(f).unwrap(), params).unwrap()
    }

    fn sym_sqrt(c: &Matrix2<f64>) -> Matrix2<f64> {
        let eig = c.symmetric_eigen();
        let d = Matrix2::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        eig.eigenvectors * d * eig.eigenvectors.transpose()
    }

    fn stress_of_e(e: &Vector3<f64>, params: &MaterialParams) -> Matrix2<f64> {
        let c = Matrix2::identity() + 2.0 * from_voigt(e);
        second_pk_stress(&DeformationState::from_f(sym_sqrt(&c)).unwrap(), params).unwrap()
    }

    #[test]
    fn identity_invariants() {
        let (j1, j2, j3) = modified_invariants(&Matrix2::identity()).unwrap();
        assert_relative_eq!(j1, 3.0, epsilon = 1e-14);
        assert_relative_eq!(j2, 3.0, epsilon = 1e-14);
        assert_relative_eq!(j3, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn biaxial_stretch_invariants() {
        let s = DeformationState::from_f(Matrix2::new(2.0, 0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(s.i1, 9.0);
        assert_relative_eq!(s.i2, 24.0);
        assert_relative_eq!(s.i3, 16.0);
        assert_relative_eq!(s.j1, 9.0 / 16f64.cbrt(), epsilon = 1e-12);
        assert_relative_eq!(s.j2, 24.0 / 16f64.powf(2.0 / 3.0), epsilon = 1e-12);
        assert!((s.j1 - 3.5717).abs() < 1e-4 && (s.j2 - 3.7798).abs() < 1e-4);
        assert_relative_eq!(s.j3, 4.0);
    }

    #[test]
    fn simple_shear_is_isochoric() {
        for g in [0.1, 0.7, 2.5] {
            let (_, _, j3) = modified_invariants(&Matrix2::new(1.0, g, 0.0, 1.0)).unwrap();
            assert_relative_eq!(j3, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn inverted_deformation_rejected() {
        let err = modified_invariants(&Matrix2::new(-1.0, 0.0, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, ConstitutiveError::InvertedElement(_)));
    }

    #[test]
    fn library_ordering_and_size() {
        let lib = FeatureLibrary::default();
        assert_eq!(lib.n_phi(), 10);
        assert_eq!(
            lib.names(),
            ["A10", "A01", "A20", "A11", "A02", "A30", "A21", "A12", "A03", "B1"]
        );
        for (m, v) in [(1, 0), (2, 1), (3, 2), (5, 2), (4, 0)] {
            if m + v == 0 {
                continue;
            }
            assert_eq!(FeatureLibrary::new(m, v).unwrap().n_phi(), m * (m + 3) / 2 + v);
        }
        assert!(FeatureLibrary::new(6, 1).is_err());
    }

    #[test]
    fn features_at_identity_vanish() {
        let phi = evaluate_features(&DeformationState::identity(), &FeatureLibrary::new(5, 2).unwrap());
        assert!(phi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn features_at_biaxial_stretch() {
        let s = DeformationState::from_f(Matrix2::new(2.0, 0.0, 0.0, 2.0)).unwrap();
        let phi = evaluate_features(&s, &FeatureLibrary::default());
        assert!((phi[0] - 0.5717).abs() < 1e-4);
        assert_relative_eq!(phi[9], 9.0, epsilon = 1e-12);
    }

    #[test]
    fn nh_energy_at_biaxial_stretch() {
        let s = DeformationState::from_f(Matrix2::new(2.0, 0.0, 0.0, 2.0)).unwrap();
        let w = strain_energy(&s, &nh()).unwrap();
        let expected = 0.5 * (9.0 / 16f64.cbrt() - 3.0) + 1.5 * 9.0;
        assert_relative_eq!(w, expected, epsilon = 1e-12);
        assert!((w - 13.786).abs() < 1e-3);
        assert_eq!(strain_energy(&DeformationState::identity(), &nh()).unwrap(), 0.0);
    }

    #[test]
    fn library_mismatch() {
        let mut p = nh();
        p.kappa = DVector::zeros(3);
        assert!(matches!(
            strain_energy(&DeformationState::identity(), &p),
            Err(ConstitutiveError::LibraryMismatch { expected: 10, got: 3 })
        ));
    }

    #[test]
    fn j3_derivative_at_identity_is_identity() {
        let d = invariant_derivatives(&DeformationState::identity());
        assert!((d.first[2] - Matrix2::identity()).norm() < 1e-14);
        // isochoric gradients vanish in the reference state
        assert!(d.first[0].norm() < 1e-14 && d.first[1].norm() < 1e-14);
    }

    #[test]
    fn invariant_gradients_match_finite_differences() {
        let f = Matrix2::new(1.1, 0.2, -0.05, 0.93);
        let s = DeformationState::from_f(f).unwrap();
        let d = invariant_derivatives(&s);
        let e0 = to_voigt(&s.e);
        let h = 1e-6;
        let js = |e: &Vector3<f64>| {
            let c = Matrix2::identity() + 2.0 * from_voigt(e);
            let st = DeformationState::from_f(sym_sqrt(&c)).unwrap();
            [st.j1, st.j2, st.j3]
        };
        for q in 0..3 {
            let mut ep = e0;
            let mut em = e0;
            ep[q] += h;
            em[q] -= h;
            let (jp, jm) = (js(&ep), js(&em));
            for k in 0..3 {
                let fd = (jp[k] - jm[k]) / (2.0 * h);
                let (i, j) = VOIGT[q];
                let an = if q == 2 { 2.0 * d.first[k][(i, j)] } else { d.first[k][(i, j)] };
                assert!((fd - an).abs() < 1e-7, "J{} comp {q}: fd {fd} vs {an}", k + 1);
            }
        }
        for k in 0..3 {
            assert!((d.first[k] - d.first[k].transpose()).norm() < 1e-15);
        }
    }

    #[test]
    fn identity_tangent_is_isotropic_with_mu_two_a10() {
        let d = material_tangent(&DeformationState::identity(), &nh()).unwrap();
        let mu = 2.0 * 0.5;
        let lambda = 2.0 * 1.5 - 4.0 / 3.0 * 0.5;
        let expected = Matrix3::new(
            lambda + 2.0 * mu,
            lambda,
            0.0,
            lambda,
            lambda + 2.0 * mu,
            0.0,
            0.0,
            0.0,
            mu,
        );
        assert!((d - expected).norm() < 1e-12, "{d}");
        assert_relative_eq!(d[(2, 2)], 1.0, epsilon = 1e-12);
        let s = second_pk_stress(&DeformationState::identity(), &full_random(&[0.3, 1.2, 0.7])).unwrap();
        assert!(s.norm() < 1e-14);
    }

    /// Term-by-term hand assembly of the NH and cubic MR stress in invariant derivatives.
    fn hand_stress(s: &DeformationState, k: &DVector<f64>) -> Matrix2<f64> {
        let d = invariant_derivatives(s);
        let (x, y, z) = (s.j1 - 3.0, s.j2 - 3.0, s.j3 - 1.0);
        let (j1e, j2e, j3e) = (d.first[0], d.first[1], d.first[2]);
        k[0] * j1e
            + k[1] * j2e
            + k[2] * 2.0 * x * j1e
            + k[3] * (y * j1e + x * j2e)
            + k[4] * 2.0 * y * j2e
            + k[5] * 3.0 * x * x * j1e
            + k[6] * (2.0 * x * y * j1e + x * x * j2e)
            + k[7] * (y * y * j1e + 2.0 * x * y * j2e)
            + k[8] * 3.0 * y * y * j2e
            + k[9] * 2.0 * z * j3e
    }

    #[test]
    fn generic_stress_matches_hand_expansion() {
        let s = DeformationState::from_f(Matrix2::new(1.1, 0.0, 0.0, 1.0)).unwrap();
        let p = nh();
        let hand = hand_stress(&s, &p.kappa);
        let only = 0.5 * invariant_derivatives(&s).first[0] + 1.5 * 2.0 * (s.j3 - 1.0) * invariant_derivatives(&s).first[2];
        let gen = second_pk_stress(&s, &p).unwrap();
        assert!((gen - hand).norm() < 1e-14 * gen.norm().max(1.0));
        assert!((gen - only).norm() < 1e-14 * gen.norm().max(1.0));
        let p = full_random(&[0.3, 0.2, 0.11, 0.05, 0.4, 0.01, 0.02, 0.03, 0.07, 1.5]);
        let s = DeformationState::from_f(Matrix2::new(1.2, 0.15, -0.1, 0.9)).unwrap();
        let gen = second_pk_stress(&s, &p).unwrap();
        assert!((gen - hand_stress(&s, &p.kappa)).norm() < 1e-13 * gen.norm());
    }

    #[test]
    fn named_params_round_trip() {
        let p = MaterialParams::mooney_rivlin(FeatureLibrary::default()).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.starts_with("{\"A10\":0.3,\"A01\":0.2"));
        let back: MaterialParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let small: MaterialParams = serde_json::from_str(r#"{"A10": 0.5, "B1": 1.5}"#).unwrap();
        assert_eq!(small.library.names(), ["A10", "A01", "B1"]);
        assert!(serde_json::from_str::<MaterialParams>(r#"{"C10": 1.0}"#).is_err());
    }

    #[test]
    fn library_descriptor_round_trip() {
        let lib = FeatureLibrary::new(2, 2).unwrap();
        let json = serde_json::to_string(&lib).unwrap();
        let back: FeatureLibrary = serde_json::from_str(&json).unwrap();
        assert_eq!(lib, back);
    }

    #[test]
    fn linear_elastic_cases() {
        assert_eq!(linear_elastic_stress(&Matrix2::zeros(), 1.35, 0.35).unwrap(), Matrix2::zeros());
        let g = 1e-3;
        let s = linear_elastic_stress(&Matrix2::new(0.0, g, g, 0.0), 1.35, 0.35).unwrap();
        assert_relative_eq!(s[(0, 1)], 1.35 / 1.35 * g, epsilon = 1e-15);
        assert_relative_eq!(s[(0, 1)], 1.35 / (1.0 + 0.35) * g, epsilon = 1e-15);
        assert!(linear_elastic_stress(&Matrix2::zeros(), 1.0, 0.5).is_err());
        assert!(linear_elastic_stress(&Matrix2::zeros(), 1.0, -1.0).is_err());
    }

    #[test]
    fn dilation_only_changes_volumetric_features() {
        let lib = FeatureLibrary::new(3, 2).unwrap();
        let f = Matrix2::new(1.1, 0.2, 0.05, 0.95);
        let s0 = DeformationState::from_f(f).unwrap();
        // in-plane dilation also changes the isochoric part under plane strain, so
        // dilate all three directions: J1, J2 are scale invariant in 3D
        let phi0 = evaluate_features(&s0, &lib);
        let j3 = s0.j3 * 1.3f64.powi(3);
        let phi1 = evaluate_features_at(s0.j1, s0.j2, j3, &lib);
        for (idx, feat) in lib.features().iter().enumerate() {
            if feat.is_volumetric() {
                assert!((phi0[idx] - phi1[idx]).abs() > 1e-6);
            } else {
                assert_eq!(phi0[idx], phi1[idx]);
            }
        }
    }

    fn random_f() -> impl Strategy<Value = Matrix2<f64>> {
        (0.7f64..1.4, 0.7f64..1.4, -0.35f64..0.35, -0.35f64..0.35)
            .prop_map(|(a, d, b, c)| Matrix2::new(a, b, c, d))
            .prop_filter("det F in [0.5, 2]", |f| {
                let det = f.determinant();
                (0.5..=2.0).contains(&det)
            })
    }

    fn random_kappa() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, 10)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn stress_is_energy_gradient(f in random_f(), k in random_kappa()) {
            let p = MaterialParams::new(FeatureLibrary::default(), DVector::from_vec(k)).unwrap();
            let st = DeformationState::from_f(f).unwrap();
            let s = second_pk_stress(&st, &p).unwrap();
            let e0 = to_voigt(&st.e);
            let h = 1e-6;
            let mut fd = Vector3::zeros();
            for q in 0..3 {
                let mut ep = e0; ep[q] += h;
                let mut em = e0; em[q] -= h;
                fd[q] = (energy_of_e(&ep, &p) - energy_of_e(&em, &p)) / (2.0 * h);
            }
            // shear partial of W w.r.t. independent E12 is 2 S12
            fd[2] *= 0.5;
            let sv = to_voigt(&s);
            prop_assert!((sv - fd).norm() <= 1e-6 * sv.norm().max(1e-3), "S {sv} fd {fd}");
        }

        #[test]
        fn tangent_is_stress_gradient(f in random_f(), k in random_kappa()) {
            let p = MaterialParams::new(FeatureLibrary::default(), DVector::from_vec(k)).unwrap();
            let st = DeformationState::from_f(f).unwrap();
            let d = material_tangent(&st, &p).unwrap();
            let e0 = to_voigt(&st.e);
            let h = 1e-6;
            let mut fd = Matrix3::zeros();
            for q in 0..3 {
                let mut ep = e0; ep[q] += h;
                let mut em = e0; em[q] -= h;
                let col = (to_voigt(&stress_of_e(&ep, &p)) - to_voigt(&stress_of_e(&em, &p))) / (2.0 * h);
                let col = if q == 2 { col * 0.5 } else { col };
                fd.set_column(q, &col);
            }
            prop_assert!((d - fd).norm() <= 1e-5 * d.norm(), "D {d} fd {fd}");
            prop_assert!((d - d.transpose()).norm() <= 1e-12 * d.norm());
        }

        #[test]
        fn zero_stress_in_reference_state(k in random_kappa()) {
            let p = MaterialParams::new(FeatureLibrary::default(), DVector::from_vec(k)).unwrap();
            let s = second_pk_stress(&DeformationState::identity(), &p).unwrap();
            prop_assert!(s.norm() < 1e-13);
        }
    }
}

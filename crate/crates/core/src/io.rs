//! CSV and JSON writers for run outputs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constitutive::FeatureLibrary;
use crate::euclid::ParetoPoint;
use crate::mesh::{Mesh, SensorSet};
use crate::pce::PCExpansion;
use crate::pipeline::DiscoveryHistory;
use crate::statfem::GaussianField;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed data: {0}")]
    Format(String),
}

fn create(path: &Path) -> Result<fs::File, IoError> {
    fs::File::create(path).map_err(|source| IoError::File { path: path.into(), source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, IoError> {
    Ok(csv::Writer::from_writer(create(path)?))
}

/// Pretty-printed JSON.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|source| IoError::File { path: path.into(), source })
}

/// `node,x,y,<name>...` with one row per mesh node.
pub fn write_nodal_csv(path: &Path, mesh: &Mesh, columns: &[(&str, &DVector<f64>)]) -> Result<(), IoError> {
    for (name, c) in columns {
        if c.len() != mesh.n_dof() {
            return Err(IoError::Format(format!("column {name} has {} entries for {} nodes", c.len(), mesh.n_dof())));
        }
    }
    let mut w = csv_writer(path)?;
    let mut header = vec!["node".to_string(), "x".into(), "y".into()];
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    w.write_record(&header)?;
    for (a, p) in mesh.nodes.iter().enumerate() {
        let mut row = vec![a.to_string(), p[0].to_string(), p[1].to_string()];
        row.extend(columns.iter().map(|(_, c)| c[a].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::File { path: path.into(), source })
}

/// Splits an interleaved DOF vector into x and y nodal components.
pub fn components(u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = u.len() / 2;
    (DVector::from_fn(n, |a, _| u[2 * a]), DVector::from_fn(n, |a, _| u[2 * a + 1]))
}

/// `node,x,y,ux,uy`
pub fn write_displacement_csv(path: &Path, mesh: &Mesh, u: &DVector<f64>) -> Result<(), IoError> {
    let (ux, uy) = components(u);
    write_nodal_csv(path, mesh, &[("ux", &ux), ("uy", &uy)])
}

/// One row per observed scalar DOF: `sensor,node,x,y,component,y_1..y_nr`.
pub fn write_observations_csv(path: &Path, mesh: &Mesh, sensors: &SensorSet, y: &[DVector<f64>]) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["sensor".to_string(), "node".into(), "x".into(), "y".into(), "component".into()];
    header.extend((1..=y.len()).map(|i| format!("y_{i}")));
    w.write_record(&header)?;
    for (s, &node) in sensors.node_indices.iter().enumerate() {
        let p = mesh.nodes[node];
        for (k, comp) in ["x", "y"].iter().enumerate() {
            let mut row = vec![s.to_string(), node.to_string(), p[0].to_string(), p[1].to_string(), comp.to_string()];
            row.extend(y.iter().map(|r| r[2 * s + k].to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|source| IoError::File { path: path.into(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub sensor: usize,
    pub requested: [f64; 2],
    pub node: usize,
    pub host: [f64; 2],
}

pub fn sensor_records(mesh: &Mesh, sensors: &SensorSet) -> Vec<SensorRecord> {
    sensors
        .positions
        .iter()
        .zip(&sensors.node_indices)
        .enumerate()
        .map(|(sensor, (&requested, &node))| SensorRecord { sensor, requested, node, host: mesh.nodes[node] })
        .collect()
}

/// `lambda,rmse,l1_norm,n_active,<feature>...`
pub fn write_pareto_csv(path: &Path, points: &[ParetoPoint], library: &FeatureLibrary) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["lambda".to_string(), "rmse".into(), "l1_norm".into(), "n_active".into()];
    header.extend(library.names());
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![p.lambda.to_string(), p.rmse.to_string(), p.l1_norm.to_string(), p.n_active.to_string()];
        row.extend(p.kappa.iter().map(|k| k.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::File { path: path.into(), source })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `iteration,rmse_u,tol,eps_w,eps_u,model,discovery_failure`
pub fn write_history_csv(path: &Path, history: &DiscoveryHistory) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "rmse_u", "tol", "eps_w", "eps_u", "model", "discovery_failure"])?;
    for r in &history.records {
        w.write_record([
            r.iteration.to_string(),
            r.rmse_u.to_string(),
            history.tol.to_string(),
            opt(r.eps_w),
            opt(r.eps_u),
            r.kappa.as_ref().map(crate::euclid::format_energy).unwrap_or_default(),
            r.discovery_failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|source| IoError::File { path: path.into(), source })
}

/// Manifest of a Gaussian field stored as a mean CSV and a raw covariance file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldManifest {
    pub dim: usize,
    /// DOF ordering of both files.
    pub ordering: String,
    pub mean_file: String,
    /// Little-endian f64, column-major, `dim × dim`.
    pub cov_file: String,
}

/// Writes `<stem>.json`, `<stem>_mean.csv` and `<stem>_cov.bin` into `dir`.
pub fn write_gaussian_field(dir: &Path, stem: &str, field: &GaussianField) -> Result<PathBuf, IoError> {
    let manifest = FieldManifest {
        dim: field.dim(),
        ordering: "node-major interleaved: [u0x, u0y, u1x, u1y, ...]".into(),
        mean_file: format!("{stem}_mean.csv"),
        cov_file: format!("{stem}_cov.bin"),
    };
    let mut w = csv_writer(&dir.join(&manifest.mean_file))?;
    w.write_record(["dof", "mean"])?;
    for (i, m) in field.mean.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string()])?;
    }
    w.flush().map_err(|source| IoError::File { path: dir.into(), source })?;
    let cov_path = dir.join(&manifest.cov_file);
    let bytes: Vec<u8> = field.cov.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    create(&cov_path)?.write_all(&bytes).map_err(|source| IoError::File { path: cov_path, source })?;
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_gaussian_field(manifest_path: &Path) -> Result<GaussianField, IoError> {
    let read = |p: &Path| -> Result<Vec<u8>, IoError> {
        let mut buf = Vec::new();
        fs::File::open(p)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|source| IoError::File { path: p.into(), source })?;
        Ok(buf)
    };
    let manifest: FieldManifest = serde_json::from_slice(&read(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(dir.join(&manifest.mean_file))?;
    let mean: Vec<f64> = r
        .records()
        .map(|rec| {
            let rec = rec?;
            rec.get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| IoError::Format("mean row".into()))
        })
        .collect::<Result<_, _>>()?;
    let bytes = read(&dir.join(&manifest.cov_file))?;
    let n = manifest.dim;
    if mean.len() != n || bytes.len() != n * n * 8 {
        return Err(IoError::Format(format!("expected dimension {n}")));
    }
    let cov: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(GaussianField { mean: DVector::from_vec(mean), cov: DMatrix::from_vec(n, n, cov) })
}

/// Chaos coefficients as `dof,u_0,...,u_P`.
pub fn write_pce_csv(path: &Path, expansion: &PCExpansion) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["dof".to_string()];
    header.extend((0..=expansion.order()).map(|j| format!("u_{j}")));
    w.write_record(&header)?;
    for i in 0..expansion.dim() {
        let mut row = vec![i.to_string()];
        row.extend(expansion.coeffs.iter().map(|c| c[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IoError::File { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_plate_with_hole, place_sensors, SensorLayout};

    #[test]
    fn gaussian_field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = GaussianField {
            mean: DVector::from_vec(vec![0.1, -2.0, 3.5e-7]),
            cov: DMatrix::from_fn(3, 3, |i, j| 1.0 / (1.0 + i as f64 + 2.0 * j as f64)),
        };
        let m = write_gaussian_field(dir.path(), "posterior", &f).unwrap();
        assert_eq!(read_gaussian_field(&m).unwrap(), f);
    }

    #[test]
    fn observation_rows_per_scalar_dof() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = build_plate_with_hole(1.0, 1.0, 0.25, 2).unwrap();
        let s = place_sensors(&mesh, &SensorLayout::Preset("medium13".into())).unwrap();
        let y = vec![DVector::from_element(26, 0.5)];
        let path = dir.path().join("y.csv");
        write_observations_csv(&path, &mesh, &s, &y).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 27);
        assert!(text.starts_with("sensor,node,x,y,component,y_1"));
    }

    #[test]
    fn displacement_csv_has_one_row_per_node() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = build_plate_with_hole(1.0, 1.0, 0.25, 1).unwrap();
        let path = dir.path().join("u.csv");
        write_displacement_csv(&path, &mesh, &DVector::zeros(mesh.n_gdof())).unwrap();
        let text = fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), mesh.n_dof() + 1);
        let bad = write_nodal_csv(&dir.path().join("x.csv"), &mesh, &[("v", &DVector::zeros(3))]);
        assert!(bad.is_err());
    }
}

//! Plane-strain quadrilateral meshes of the plate-with-hole domain.
//!
//! The default discretization is a structured O-grid around the central hole
//! built from 4-node bilinear quadrilaterals with a 2×2 Gauss rule. The coarse
//! meshes spanned by sensor locations (used by the direct-regression baseline)
//! are Delaunay triangulations whose triangles are stored as collapsed
//! quadrilaterals, so both kinds of mesh share one element kernel.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Spatial dimension.
pub const DIM: usize = 2;

/// Abscissa of the 2-point Gauss rule on [-1, 1].
const GAUSS_2: f64 = 0.577_350_269_189_625_8;

/// Reference coordinates of the four element nodes, counter-clockwise.
const NODE_XI: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

/// Tolerance used when classifying boundary nodes, relative to the plate size.
const BOUNDARY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("element {element} has non-positive Jacobian determinant {det_j:e}")]
    DegenerateElement { element: usize, det_j: f64 },
    #[error("sensors collide on mesh nodes: {}", format_collisions(.0))]
    SensorCollision(Vec<(usize, Vec<usize>)>),
    #[error("unknown sensor preset '{0}' (expected sparse3, medium13 or dense38)")]
    UnknownPreset(String),
    #[error("no admissible node available for sensor at ({0}, {1})")]
    NoHostNode(f64, f64),
    #[error("sensor mesh construction failed: {0}")]
    Triangulation(String),
}

fn format_collisions(c: &[(usize, Vec<usize>)]) -> String {
    c.iter()
        .map(|(node, sensors)| format!("node {node} <- sensors {sensors:?}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Circular hole cut out of the rectangular plate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Hole {
    pub fn contains_strictly(&self, p: [f64; 2]) -> bool {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        (dx * dx + dy * dy).sqrt() < self.radius * (1.0 - 1e-9)
    }
}

/// 2D plane-strain mesh of bilinear quadrilaterals.
///
/// Serialized field order is fixed: `nodes`, `elements`, `dirichlet_dofs`,
/// `neumann_edges`, `width`, `height`, `hole`. DOF `2*n` is the x-displacement
/// of node `n` and `2*n + 1` its y-displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 4]>,
    pub dirichlet_dofs: BTreeSet<usize>,
    /// `(element, local edge)` pairs; local edge `k` joins local nodes `k` and `(k+1) % 4`.
    pub neumann_edges: Vec<(usize, usize)>,
    pub width: f64,
    pub height: f64,
    pub hole: Option<Hole>,
}

/// Geometric data at one quadrature point of an element.
#[derive(Debug, Clone, Copy)]
pub struct GaussPoint {
    /// Shape function values.
    pub n: [f64; 4],
    /// Reference-configuration gradients `dN_a/dX`, one row per node.
    pub dn_dx: [[f64; 2]; 4],
    /// Integration weight times Jacobian determinant.
    pub weight: f64,
    /// Reference coordinates of the point.
    pub x: [f64; 2],
}

/// Bilinear shape functions at reference coordinates.
pub fn shape_functions(xi: f64, eta: f64) -> [f64; 4] {
    let mut n = [0.0; 4];
    for (a, c) in NODE_XI.iter().enumerate() {
        n[a] = 0.25 * (1.0 + c[0] * xi) * (1.0 + c[1] * eta);
    }
    n
}

/// Derivatives of the shape functions with respect to `(xi, eta)`.
pub fn shape_derivatives(xi: f64, eta: f64) -> [[f64; 2]; 4] {
    let mut d = [[0.0; 2]; 4];
    for (a, c) in NODE_XI.iter().enumerate() {
        d[a][0] = 0.25 * c[0] * (1.0 + c[1] * eta);
        d[a][1] = 0.25 * c[1] * (1.0 + c[0] * xi);
    }
    d
}

/// 2×2 Gauss points and weights on the reference square.
pub fn gauss_rule() -> [([f64; 2], f64); 4] {
    let g = GAUSS_2;
    [([-g, -g], 1.0), ([g, -g], 1.0), ([g, g], 1.0), ([-g, g], 1.0)]
}

impl Mesh {
    /// Number of mesh nodes.
    pub fn n_dof(&self) -> usize {
        self.nodes.len()
    }

    /// Number of scalar degrees of freedom.
    pub fn n_gdof(&self) -> usize {
        self.nodes.len() * DIM
    }

    pub fn free_dofs(&self) -> Vec<usize> {
        (0..self.n_gdof())
            .filter(|d| !self.dirichlet_dofs.contains(d))
            .collect()
    }

    pub fn is_dirichlet_node(&self, node: usize) -> bool {
        self.dirichlet_dofs.contains(&(2 * node)) || self.dirichlet_dofs.contains(&(2 * node + 1))
    }

    /// Global DOF indices of an element in local order `[u_0x, u_0y, u_1x, ...]`.
    pub fn element_dofs(&self, element: usize) -> [usize; 8] {
        let conn = self.elements[element];
        let mut dofs = [0; 8];
        for (a, &n) in conn.iter().enumerate() {
            dofs[2 * a] = 2 * n;
            dofs[2 * a + 1] = 2 * n + 1;
        }
        dofs
    }

    /// Quadrature data of an element; errors on a non-positive Jacobian.
    pub fn gauss_points(&self, element: usize) -> Result<[GaussPoint; 4], MeshError> {
        let conn = self.elements[element];
        let coords: [[f64; 2]; 4] = std::array::from_fn(|a| self.nodes[conn[a]]);
        let mut out = [GaussPoint {
            n: [0.0; 4],
            dn_dx: [[0.0; 2]; 4],
            weight: 0.0,
            x: [0.0; 2],
        }; 4];
        for (q, (xi, w)) in gauss_rule().iter().enumerate() {
            let n = shape_functions(xi[0], xi[1]);
            let dn = shape_derivatives(xi[0], xi[1]);
            // J_ij = dX_i / dxi_j
            let mut jac = Matrix2::zeros();
            let mut x = [0.0; 2];
            for a in 0..4 {
                for i in 0..2 {
                    x[i] += n[a] * coords[a][i];
                    for j in 0..2 {
                        jac[(i, j)] += coords[a][i] * dn[a][j];
                    }
                }
            }
            let det_j = jac.determinant();
            if det_j <= 0.0 {
                return Err(MeshError::DegenerateElement { element, det_j });
            }
            let inv = jac.try_inverse().ok_or(MeshError::DegenerateElement { element, det_j })?;
            let mut dn_dx = [[0.0; 2]; 4];
            for a in 0..4 {
                let g = inv.transpose() * Vector2::new(dn[a][0], dn[a][1]);
                dn_dx[a] = [g[0], g[1]];
            }
            out[q] = GaussPoint { n, dn_dx, weight: w * det_j, x };
        }
        Ok(out)
    }

    /// Checks Jacobians, DOF bookkeeping and the hole constraint.
    pub fn validate(&self) -> Result<(), MeshError> {
        for e in 0..self.elements.len() {
            if self.elements[e].iter().any(|&n| n >= self.nodes.len()) {
                return Err(MeshError::InvalidGeometry(format!(
                    "element {e} references a missing node"
                )));
            }
            self.gauss_points(e)?;
        }
        if let Some(&d) = self.dirichlet_dofs.iter().next_back() {
            if d >= self.n_gdof() {
                return Err(MeshError::InvalidGeometry(format!("Dirichlet DOF {d} out of range")));
            }
        }
        if let Some(hole) = &self.hole {
            if let Some(i) = self.nodes.iter().position(|&p| hole.contains_strictly(p)) {
                return Err(MeshError::InvalidGeometry(format!("node {i} lies inside the hole")));
            }
        }
        Ok(())
    }

    /// Nodes of a Neumann edge in local order.
    pub fn edge_nodes(&self, element: usize, edge: usize) -> (usize, usize) {
        let conn = self.elements[element];
        (conn[edge], conn[(edge + 1) % 4])
    }

    pub fn edge_length(&self, element: usize, edge: usize) -> f64 {
        let (a, b) = self.edge_nodes(element, edge);
        let pa = self.nodes[a];
        let pb = self.nodes[b];
        ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt()
    }

    /// Total quadrature-integrated area.
    pub fn area(&self) -> Result<f64, MeshError> {
        let mut area = 0.0;
        for e in 0..self.elements.len() {
            area += self.gauss_points(e)?.iter().map(|g| g.weight).sum::<f64>();
        }
        Ok(area)
    }

    /// Index of the node closest to `p`, skipping nodes for which `skip` holds.
    pub fn nearest_node(&self, p: [f64; 2], skip: impl Fn(usize) -> bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, q) in self.nodes.iter().enumerate() {
            if skip(i) {
                continue;
            }
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            // strict comparison keeps the lowest index on ties
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> Result<Self, MeshError> {
        let mesh: Mesh = serde_json::from_str(s)
            .map_err(|e| MeshError::InvalidGeometry(format!("malformed mesh document: {e}")))?;
        mesh.validate()?;
        Ok(mesh)
    }
}

/// Point on the rectangle boundary reached by walking a normalized perimeter
/// parameter `s ∈ [0, 8)`, where each unit covers one half-edge starting at
/// the middle of the right edge and running counter-clockwise.
fn rectangle_boundary_point(s: f64, width: f64, height: f64) -> [f64; 2] {
    let (cx, cy) = (0.5 * width, 0.5 * height);
    let (hw, hh) = (0.5 * width, 0.5 * height);
    let seg = s.floor() as usize % 8;
    let t = s - s.floor();
    match seg {
        0 => [cx + hw, cy + t * hh],
        1 => [cx + hw - t * hw, cy + hh],
        2 => [cx - t * hw, cy + hh],
        3 => [cx - hw, cy + hh - t * hh],
        4 => [cx - hw, cy - t * hh],
        5 => [cx - hw + t * hw, cy - hh],
        6 => [cx + t * hw, cy - hh],
        _ => [cx + hw, cy - hh + t * hh],
    }
}

/// Builds a structured O-grid around a central circular hole.
///
/// The left edge is fully clamped, the right edge carries the Neumann load and
/// the top/bottom edges are traction free. `refinement = r` gives `16 r`
/// circumferential and `4 r` radial element layers.
pub fn build_plate_with_hole(
    width: f64,
    height: f64,
    hole_radius: f64,
    refinement: usize,
) -> Result<Mesh, MeshError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(MeshError::InvalidGeometry("plate dimensions must be positive".into()));
    }
    if !(hole_radius > 0.0 && hole_radius < 0.5 * width.min(height)) {
        return Err(MeshError::InvalidGeometry(format!(
            "hole radius {hole_radius} must lie in (0, {})",
            0.5 * width.min(height)
        )));
    }
    if refinement < 1 {
        return Err(MeshError::InvalidGeometry("refinement must be at least 1".into()));
    }
    let n_theta = 16 * refinement;
    let n_rad = 4 * refinement;
    let per_half_edge = n_theta / 8;
    let center = [0.5 * width, 0.5 * height];

    let node_id = |k: usize, j: usize| (k % n_theta) * (n_rad + 1) + j;
    let mut nodes = vec![[0.0; 2]; n_theta * (n_rad + 1)];
    for k in 0..n_theta {
        let theta = 2.0 * PI * k as f64 / n_theta as f64;
        let inner = [
            center[0] + hole_radius * theta.cos(),
            center[1] + hole_radius * theta.sin(),
        ];
        let outer = rectangle_boundary_point(k as f64 / per_half_edge as f64, width, height);
        for j in 0..=n_rad {
            let t = j as f64 / n_rad as f64;
            nodes[node_id(k, j)] = [
                inner[0] + t * (outer[0] - inner[0]),
                inner[1] + t * (outer[1] - inner[1]),
            ];
        }
    }

    let mut elements = Vec::with_capacity(n_theta * n_rad);
    for k in 0..n_theta {
        for j in 0..n_rad {
            elements.push([node_id(k, j), node_id(k, j + 1), node_id(k + 1, j + 1), node_id(k + 1, j)]);
        }
    }

    let tol = BOUNDARY_TOL * width.max(height);
    let mut dirichlet_dofs = BTreeSet::new();
    for (i, p) in nodes.iter().enumerate() {
        if p[0].abs() < tol {
            dirichlet_dofs.insert(2 * i);
            dirichlet_dofs.insert(2 * i + 1);
        }
    }
    let mut neumann_edges = Vec::new();
    for (e, conn) in elements.iter().enumerate() {
        for edge in 0..4 {
            let a = nodes[conn[edge]];
            let b = nodes[conn[(edge + 1) % 4]];
            if (a[0] - width).abs() < tol && (b[0] - width).abs() < tol {
                neumann_edges.push((e, edge));
            }
        }
    }

    let mesh = Mesh {
        nodes,
        elements,
        dirichlet_dofs,
        neumann_edges,
        width,
        height,
        hole: Some(Hole { center, radius: hole_radius }),
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Sensor placement request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorLayout {
    Preset(String),
    Explicit(Vec<[f64; 2]>),
}

/// Sensors hosted on mesh nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSet {
    /// Requested sensor coordinates.
    pub positions: Vec<[f64; 2]>,
    /// Mesh nodes hosting each sensor.
    pub node_indices: Vec<usize>,
}

impl SensorSet {
    pub fn n_sen(&self) -> usize {
        self.node_indices.len()
    }

    pub fn n_gsen(&self) -> usize {
        self.node_indices.len() * DIM
    }

    /// Observed global DOFs, sensor-major: `[s0x, s0y, s1x, s1y, ...]`.
    pub fn observed_dofs(&self) -> Vec<usize> {
        self.node_indices.iter().flat_map(|&n| [2 * n, 2 * n + 1]).collect()
    }

    /// Coordinates of the hosting nodes.
    pub fn host_coordinates(&self, mesh: &Mesh) -> Vec<[f64; 2]> {
        self.node_indices.iter().map(|&n| mesh.nodes[n]).collect()
    }
}

/// Sensor coordinates of a named preset for a given plate.
///
/// Presets mimic the quasi-uniform layouts of the reference study: rings around
/// the hole plus points near the outer boundary. Points on the loaded right edge
/// are included so that a sensor-spanned mesh reaches the Neumann boundary.
pub fn preset_positions(
    name: &str,
    width: f64,
    height: f64,
    hole_radius: f64,
) -> Result<Vec<[f64; 2]>, MeshError> {
    let c = [0.5 * width, 0.5 * height];
    let half = 0.5 * width.min(height);
    let ring = |frac: f64, count: usize, offset_deg: f64| -> Vec<[f64; 2]> {
        let r = hole_radius + frac * (half - hole_radius);
        (0..count)
            .map(|k| {
                let t = (offset_deg + 360.0 * k as f64 / count as f64).to_radians();
                [c[0] + r * t.cos(), c[1] + r * t.sin()]
            })
            .collect()
    };
    let at = |fx: f64, fy: f64| [fx * width, fy * height];
    let pts = match name {
        "sparse3" => vec![at(1.0, 0.5), at(0.5, 0.9), at(0.5, 0.1)],
        "medium13" => {
            let mut p = vec![at(1.0, 0.0), at(1.0, 0.5), at(1.0, 1.0), at(0.5, 1.0), at(0.5, 0.0)];
            p.extend(ring(0.35, 8, 0.0));
            p
        }
        "dense38" => {
            let mut p = ring(0.25, 12, 0.0);
            p.extend(ring(0.7, 8, 22.5));
            p.extend([0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|&fy| at(1.0, fy)));
            p.extend([0.125, 0.375, 0.625, 0.875].iter().map(|&fx| at(fx, 1.0)));
            p.extend([0.125, 0.375, 0.625, 0.875].iter().map(|&fx| at(fx, 0.0)));
            p.extend([0.25, 0.5, 0.75].iter().map(|&fy| at(0.08, fy)));
            p.extend([at(0.08, 0.08), at(0.08, 0.92)]);
            p
        }
        other => return Err(MeshError::UnknownPreset(other.to_string())),
    };
    Ok(pts)
}

/// Snaps each requested sensor to the nearest node off the Dirichlet boundary.
pub fn place_sensors(mesh: &Mesh, layout: &SensorLayout) -> Result<SensorSet, MeshError> {
    let positions = match layout {
        SensorLayout::Explicit(p) => p.clone(),
        SensorLayout::Preset(name) => {
            let r = mesh.hole.map(|h| h.radius).unwrap_or(0.0);
            preset_positions(name, mesh.width, mesh.height, r)?
        }
    };
    if positions.is_empty() {
        return Err(MeshError::InvalidGeometry("at least one sensor is required".into()));
    }
    let mut node_indices = Vec::with_capacity(positions.len());
    for p in &positions {
        let n = mesh
            .nearest_node(*p, |i| mesh.is_dirichlet_node(i))
            .ok_or(MeshError::NoHostNode(p[0], p[1]))?;
        node_indices.push(n);
    }
    let mut hosts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (s, &n) in node_indices.iter().enumerate() {
        hosts.entry(n).or_default().push(s);
    }
    let collisions: Vec<_> = hosts.into_iter().filter(|(_, s)| s.len() > 1).collect();
    if !collisions.is_empty() {
        return Err(MeshError::SensorCollision(collisions));
    }
    Ok(SensorSet { positions, node_indices })
}

/// Coarse mesh whose nodes are the sensor locations plus clamped corner anchors.
#[derive(Debug, Clone)]
pub struct SensorMesh {
    pub mesh: Mesh,
    /// Mesh node of each sensor, in sensor order.
    pub sensor_nodes: Vec<usize>,
    /// Anchor nodes on the clamped edge (zero displacement).
    pub anchor_nodes: Vec<usize>,
}

/// Triangulates sensor coordinates plus the two clamped corners.
///
/// Triangles are Delaunay; those whose centroid falls inside the hole are
/// dropped. Each triangle `(a, b, c)` is stored as the collapsed quadrilateral
/// `[a, b, c, c]`, which keeps all Gauss points strictly inside the triangle.
pub fn build_sensor_mesh(
    points: &[[f64; 2]],
    width: f64,
    height: f64,
    hole: Option<Hole>,
) -> Result<SensorMesh, MeshError> {
    let tol = BOUNDARY_TOL * width.max(height) * 1e3;
    let mut nodes: Vec<[f64; 2]> = points.to_vec();
    let sensor_nodes: Vec<usize> = (0..points.len()).collect();
    let mut anchor_nodes = Vec::new();
    for corner in [[0.0, 0.0], [0.0, height]] {
        if !nodes.iter().any(|p| (p[0] - corner[0]).abs() < tol && (p[1] - corner[1]).abs() < tol) {
            anchor_nodes.push(nodes.len());
            nodes.push(corner);
        }
    }
    let dpts: Vec<delaunator::Point> = nodes.iter().map(|p| delaunator::Point { x: p[0], y: p[1] }).collect();
    let tri = delaunator::triangulate(&dpts);
    if tri.triangles.is_empty() {
        return Err(MeshError::Triangulation("points are collinear or too few".into()));
    }
    let mut elements = Vec::new();
    for t in tri.triangles.chunks(3) {
        let (a, b, c) = (t[0], t[1], t[2]);
        let (pa, pb, pc) = (nodes[a], nodes[b], nodes[c]);
        let cross = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
        let centroid = [(pa[0] + pb[0] + pc[0]) / 3.0, (pa[1] + pb[1] + pc[1]) / 3.0];
        if hole.is_some_and(|h| h.contains_strictly(centroid)) {
            continue;
        }
        let scale = width.max(height).powi(2);
        if cross.abs() < 1e-10 * scale {
            continue;
        }
        if cross > 0.0 {
            elements.push([a, b, c, c]);
        } else {
            elements.push([a, c, b, b]);
        }
    }
    if elements.is_empty() {
        return Err(MeshError::Triangulation("no usable triangles".into()));
    }
    let mut dirichlet_dofs = BTreeSet::new();
    for (i, p) in nodes.iter().enumerate() {
        if p[0].abs() < tol {
            dirichlet_dofs.insert(2 * i);
            dirichlet_dofs.insert(2 * i + 1);
        }
    }
    let mut neumann_edges = Vec::new();
    for (e, conn) in elements.iter().enumerate() {
        for edge in 0..4 {
            let (a, b) = (conn[edge], conn[(edge + 1) % 4]);
            if a != b && (nodes[a][0] - width).abs() < tol && (nodes[b][0] - width).abs() < tol {
                neumann_edges.push((e, edge));
            }
        }
    }
    let mesh = Mesh {
        nodes,
        elements,
        dirichlet_dofs,
        neumann_edges,
        width,
        height,
        hole,
    };
    mesh.validate()?;
    Ok(SensorMesh { mesh, sensor_nodes, anchor_nodes })
}

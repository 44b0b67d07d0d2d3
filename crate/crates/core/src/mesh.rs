//! Reference configuration: a P1 tetrahedral mesh with piecewise-constant
//! reference density, plus the deformation state living on its nodes.
//!
//! Every element caches its signed reference volume and the inverse of its
//! reference edge matrix `Dm = [X1 - X0, X2 - X0, X3 - X0]`, so the deformation
//! gradient of an element is `F = Ds * Dm^-1`, constant over the element.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Elements whose reference volume falls below this fraction of the bounding
/// box volume are rejected as degenerate.
pub const DEGENERATE_VOLUME_FRACTION: f64 = 1e-12;

/// Outward-oriented faces of a positively oriented tetrahedron, by local index.
pub const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBody {
    nodes: Vec<Vec3>,
    elements: Vec<[usize; 4]>,
    rho_ref: Vec<f64>,
    volumes: Vec<f64>,
    inv_shape: Vec<Mat3>,
}

/// Nodal positions of a piecewise-affine deformation.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationState {
    pub positions: Vec<Vec3>,
}

impl DeformationState {
    pub fn new(positions: Vec<Vec3>) -> Self {
        Self { positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn translated(&self, d: &Vec3) -> Self {
        Self::new(self.positions.iter().map(|p| p + d).collect())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.positions.iter().map(|p| p * factor).collect())
    }

    pub fn mapped(&self, f: impl FnMut(&Vec3) -> Vec3) -> Self {
        Self::new(self.positions.iter().map(f).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.positions
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .collect()
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        debug_assert_eq!(flat.len() % 3, 0);
        Self::new(
            flat.chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }
}

/// A boundary triangle: the owning element, and its three node indices
/// ordered so the normal points out of the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub element: usize,
    pub nodes: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rho_min: f64,
    pub rho_max: f64,
    pub total_mass: f64,
    pub total_volume: f64,
    pub connected: bool,
    pub closed_manifold: bool,
    pub degenerate_elements: Vec<usize>,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn shape_matrix(p: [&Vec3; 4]) -> Mat3 {
    Mat3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]])
}

/// Signed volume of a tetrahedron given by four points.
pub fn tet_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    shape_matrix([a, b, c, d]).determinant() / 6.0
}

impl ReferenceBody {
    /// Builds a body from raw arrays. Only structural consistency is checked
    /// here; geometric and density invariants are reported by [`validate`].
    ///
    /// [`validate`]: ReferenceBody::validate
    pub fn new(nodes: Vec<Vec3>, elements: Vec<[usize; 4]>, rho_ref: Vec<f64>) -> Result<Self> {
        if elements.len() != rho_ref.len() {
            return Err(Error::invalid(
                "rho_ref",
                format!(
                    "{} densities given for {} elements",
                    rho_ref.len(),
                    elements.len()
                ),
            ));
        }
        if elements.is_empty() {
            return Err(Error::invalid("elements", "mesh has no elements"));
        }
        for (e, tet) in elements.iter().enumerate() {
            if let Some(&bad) = tet.iter().find(|&&i| i >= nodes.len()) {
                return Err(Error::invalid(
                    "elements",
                    format!("element {e} references node {bad} of {}", nodes.len()),
                ));
            }
        }
        let mut volumes = Vec::with_capacity(elements.len());
        let mut inv_shape = Vec::with_capacity(elements.len());
        for tet in &elements {
            let dm = shape_matrix(tet.map(|i| &nodes[i]));
            volumes.push(dm.determinant() / 6.0);
            inv_shape.push(dm.try_inverse().unwrap_or_else(Mat3::zeros));
        }
        Ok(Self {
            nodes,
            elements,
            rho_ref,
            volumes,
            inv_shape,
        })
    }

    pub fn nodes(&self) -> &[Vec3] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn rho_ref(&self) -> &[f64] {
        &self.rho_ref
    }

    /// Signed reference volumes.
    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// `Dm^-1` of element `e`; rows are the gradients of the shape functions of
    /// local nodes 1..3 (node 0 takes minus their sum).
    pub fn inverse_shape(&self, e: usize) -> &Mat3 {
        &self.inv_shape[e]
    }

    /// Lumped element masses `rho_ref_e * vol_e`.
    pub fn element_masses(&self) -> Vec<f64> {
        self.rho_ref
            .iter()
            .zip(&self.volumes)
            .map(|(r, v)| r * v)
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.rho_ref.iter().zip(&self.volumes).map(|(r, v)| r * v).sum()
    }

    pub fn total_volume(&self) -> f64 {
        self.volumes.iter().sum()
    }

    /// The identity deformation.
    pub fn reference_state(&self) -> DeformationState {
        DeformationState::new(self.nodes.clone())
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.nodes)
    }

    /// Diagonal of the reference bounding box; the length scale of the body.
    pub fn length_scale(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    pub fn check_state(&self, state: &DeformationState) -> Result<()> {
        if state.len() != self.nodes.len() {
            return Err(Error::NodeCountMismatch {
                expected: self.nodes.len(),
                got: state.len(),
            });
        }
        Ok(())
    }

    /// Deformation gradient of element `e`, the unique linear part of the
    /// affine map sending its reference vertices to its deformed vertices.
    pub fn element_gradient(&self, state: &DeformationState, e: usize) -> Result<Mat3> {
        self.check_state(state)?;
        let tet = self
            .elements
            .get(e)
            .ok_or_else(|| Error::invalid("element", format!("index {e} out of range")))?;
        if self.volumes[e] <= 0.0 {
            return Err(Error::DegenerateElement { element: e });
        }
        Ok(self.gradient_unchecked(&state.positions, tet, e))
    }

    #[inline]
    pub(crate) fn gradient_unchecked(&self, positions: &[Vec3], tet: &[usize; 4], e: usize) -> Mat3 {
        shape_matrix(tet.map(|i| &positions[i])) * self.inv_shape[e]
    }

    /// Deformation gradients of all elements.
    pub fn deformation_gradients(&self, state: &DeformationState) -> Vec<Mat3> {
        self.elements
            .iter()
            .enumerate()
            .map(|(e, tet)| self.gradient_unchecked(&state.positions, tet, e))
            .collect()
    }

    /// Deformed element barycenters.
    pub fn barycenters(&self, state: &DeformationState) -> Vec<Vec3> {
        self.elements
            .iter()
            .map(|tet| {
                (state.positions[tet[0]]
                    + state.positions[tet[1]]
                    + state.positions[tet[2]]
                    + state.positions[tet[3]])
                    * 0.25
            })
            .collect()
    }

    /// Faces that belong to exactly one element, oriented outward.
    pub fn boundary_faces(&self) -> Vec<BoundaryFace> {
        let mut count: HashMap<[usize; 3], (usize, BoundaryFace)> = HashMap::new();
        for (e, tet) in self.elements.iter().enumerate() {
            for local in TET_FACES {
                let mut nodes = local.map(|i| tet[i]);
                if self.volumes[e] < 0.0 {
                    nodes.swap(1, 2);
                }
                let mut key = nodes;
                key.sort_unstable();
                count
                    .entry(key)
                    .and_modify(|(n, _)| *n += 1)
                    .or_insert((1, BoundaryFace { element: e, nodes }));
            }
        }
        let mut faces: Vec<_> = count
            .into_values()
            .filter(|(n, _)| *n == 1)
            .map(|(_, f)| f)
            .collect();
        faces.sort_unstable_by_key(|f| (f.element, f.nodes));
        faces
    }

    /// Sorted indices of nodes lying on the boundary surface.
    pub fn boundary_nodes(&self) -> Vec<usize> {
        let mut on = vec![false; self.nodes.len()];
        for f in self.boundary_faces() {
            for n in f.nodes {
                on[n] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| on[i]).collect()
    }

    /// Checks density bounds, element orientation and quality, face
    /// connectivity and closedness of the boundary surface.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();

        let rho_min = self.rho_ref.iter().copied().fold(f64::INFINITY, f64::min);
        let rho_max = self.rho_ref.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (e, &r) in self.rho_ref.iter().enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                violations.push(format!(
                    "element {e}: rho_ref = {r} (must be finite and strictly positive)"
                ));
            }
        }

        let (lo, hi) = self.bounding_box();
        let ext = hi - lo;
        let threshold = DEGENERATE_VOLUME_FRACTION * ext.x * ext.y * ext.z;
        let degenerate_elements: Vec<usize> = (0..self.elements.len())
            .filter(|&e| self.volumes[e] <= threshold)
            .collect();
        for &e in &degenerate_elements {
            violations.push(format!(
                "element {e}: reference volume {} is inverted or degenerate",
                self.volumes[e]
            ));
        }

        let (connected, closed_manifold, topo) = self.topology();
        violations.extend(topo);

        ValidationReport {
            rho_min,
            rho_max,
            total_mass: self.total_mass(),
            total_volume: self.total_volume(),
            connected,
            closed_manifold,
            degenerate_elements,
            violations,
        }
    }

    fn topology(&self) -> (bool, bool, Vec<String>) {
        let mut problems = Vec::new();
        let mut face_owners: HashMap<[usize; 3], Vec<usize>> = HashMap::new();
        for (e, tet) in self.elements.iter().enumerate() {
            for local in TET_FACES {
                let mut key = local.map(|i| tet[i]);
                key.sort_unstable();
                face_owners.entry(key).or_default().push(e);
            }
        }

        let mut parent: Vec<usize> = (0..self.elements.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut manifold = true;
        let mut edge_use: HashMap<[usize; 2], usize> = HashMap::new();
        let mut keys: Vec<_> = face_owners.keys().copied().collect();
        keys.sort_unstable();
        for key in keys {
            let owners = &face_owners[&key];
            match owners.len() {
                1 => {
                    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
                        *edge_use.entry([key[a], key[b]]).or_default() += 1;
                    }
                }
                2 => {
                    let (ra, rb) = (find(&mut parent, owners[0]), find(&mut parent, owners[1]));
                    parent[ra] = rb;
                }
                n => {
                    manifold = false;
                    problems.push(format!("face {key:?} is shared by {n} elements"));
                }
            }
        }
        let open_edges = edge_use.values().filter(|&&n| n != 2).count();
        if open_edges > 0 {
            manifold = false;
            problems.push(format!(
                "boundary surface is not a closed 2-manifold ({open_edges} irregular edges)"
            ));
        }

        let root = find(&mut parent, 0);
        let components = (0..self.elements.len())
            .filter(|&e| find(&mut parent, e) == e)
            .count();
        let connected = (0..self.elements.len()).all(|e| find(&mut parent, e) == root);
        if !connected {
            problems.push(format!("mesh has {components} face-connected components"));
        }
        (connected, manifold, problems)
    }
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {value}")))
    }
}

/// Structured grid of `(nx+1)(ny+1)(nz+1)` nodes over `[0,1]^3` cells, each hex
/// split into five tetrahedra with alternating orientation so that face
/// diagonals match between neighbours.
fn structured_grid(n: [usize; 3]) -> (Vec<Vec3>, Vec<[usize; 4]>) {
    let idx = |i: usize, j: usize, k: usize| i + (n[0] + 1) * (j + (n[1] + 1) * k);
    let mut nodes = Vec::with_capacity((n[0] + 1) * (n[1] + 1) * (n[2] + 1));
    for k in 0..=n[2] {
        for j in 0..=n[1] {
            for i in 0..=n[0] {
                nodes.push(Vec3::new(i as f64, j as f64, k as f64));
            }
        }
    }
    // Corner tets of the even cell: each corner with its three neighbours;
    // the remaining four vertices form the central tet.
    const EVEN: [[[usize; 3]; 4]; 5] = [
        [[1, 0, 0], [0, 0, 0], [1, 1, 0], [1, 0, 1]],
        [[0, 1, 0], [0, 0, 0], [0, 1, 1], [1, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [1, 0, 1], [0, 1, 1]],
        [[1, 1, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1]],
        [[0, 0, 0], [1, 1, 0], [0, 1, 1], [1, 0, 1]],
    ];
    let mut elements = Vec::with_capacity(5 * n[0] * n[1] * n[2]);
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let odd = (i + j + k) % 2 == 1;
                for tet in EVEN {
                    let ids = tet.map(|[a, b, c]| {
                        // Mirror in x for odd cells.
                        let a = if odd { 1 - a } else { a };
                        idx(i + a, j + b, k + c)
                    });
                    elements.push(ids);
                }
            }
        }
    }
    (nodes, elements)
}

fn orient_positive(nodes: &[Vec3], elements: &mut [[usize; 4]]) {
    for tet in elements.iter_mut() {
        let v = tet_volume(&nodes[tet[0]], &nodes[tet[1]], &nodes[tet[2]], &nodes[tet[3]]);
        if v < 0.0 {
            tet.swap(2, 3);
        }
    }
}

/// Box `[0,ex] x [0,ey] x [0,ez]` with `nx * ny * nz` hex cells, five
/// tetrahedra per cell.
pub fn build_box_mesh(extents: [f64; 3], subdivisions: [usize; 3], density: f64) -> Result<ReferenceBody> {
    for e in extents {
        check_positive("extents", e)?;
    }
    if let Some(&bad) = subdivisions.iter().find(|&&s| s == 0) {
        return Err(Error::invalid(
            "subdivisions",
            format!("must be positive, got {bad}"),
        ));
    }
    check_positive("density", density)?;
    let (grid, mut elements) = structured_grid(subdivisions);
    let nodes: Vec<Vec3> = grid
        .iter()
        .map(|p| {
            Vec3::new(
                p.x * extents[0] / subdivisions[0] as f64,
                p.y * extents[1] / subdivisions[1] as f64,
                p.z * extents[2] / subdivisions[2] as f64,
            )
        })
        .collect();
    orient_positive(&nodes, &mut elements);
    let rho = vec![density; elements.len()];
    ReferenceBody::new(nodes, elements, rho)
}

/// Ball of the given radius centred at the origin. A cube `[-1,1]^3` with
/// `2 * resolution` cells per axis is pushed onto the ball by the radial map
/// `x -> x * |x|_inf / |x|_2`, which puts every boundary node on the sphere.
pub fn build_ball_mesh(radius: f64, resolution: usize, density: f64) -> Result<ReferenceBody> {
    check_positive("radius", radius)?;
    if resolution == 0 {
        return Err(Error::invalid("resolution", "must be at least 1"));
    }
    check_positive("density", density)?;
    let n = 2 * resolution;
    let (grid, mut elements) = structured_grid([n; 3]);
    let half = resolution as f64;
    let nodes: Vec<Vec3> = grid
        .iter()
        .map(|p| {
            let c = (p - Vec3::repeat(half)) / half;
            let r2 = c.norm();
            if r2 == 0.0 {
                c
            } else {
                c * (c.amax() / r2 * radius)
            }
        })
        .collect();
    orient_positive(&nodes, &mut elements);
    let rho = vec![density; elements.len()];
    ReferenceBody::new(nodes, elements, rho)
}

/// The standard unit tetrahedron with vertices at the origin and the unit
/// axis points (volume 1/6).
pub fn unit_tet(density: f64) -> Result<ReferenceBody> {
    ReferenceBody::new(
        vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
        vec![[0, 1, 2, 3]],
        vec![density],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn box_volume_and_mass() {
        let b = build_box_mesh([1.0, 1.0, 1.0], [1, 1, 1], 6.0).unwrap();
        assert_eq!(b.num_elements(), 5);
        assert_relative_eq!(b.total_mass(), 6.0, max_relative = 1e-14);
        let b = build_box_mesh([2.0, 1.0, 1.0], [3, 2, 2], 1.0).unwrap();
        assert_relative_eq!(b.total_volume(), 2.0, max_relative = 1e-14);
        assert!(b.validate().passed(), "{:?}", b.validate().violations);
        assert_eq!(build_box_mesh([1.0, 1.0, 1.0], [5, 2, 2], 1.0).unwrap().num_elements(), 100);
    }

    #[test]
    fn box_rejects_bad_input() {
        assert!(build_box_mesh([1.0, 1.0, 1.0], [0, 1, 1], 1.0).is_err());
        assert!(build_box_mesh([-1.0, 1.0, 1.0], [1, 1, 1], 1.0).is_err());
        assert!(build_box_mesh([1.0, 1.0, 1.0], [1, 1, 1], 0.0).is_err());
    }

    #[test]
    fn ball_volume_coarse_and_refined() {
        let exact = 4.0 * PI / 3.0;
        let coarse = build_ball_mesh(1.0, 1, 1.0).unwrap();
        assert!(coarse.validate().passed());
        assert!((coarse.total_volume() - exact).abs() / exact < 0.25);

        let mut prev = 0.0;
        for res in 1..=5 {
            let v = build_ball_mesh(1.0, res, 1.0).unwrap().total_volume();
            assert!(v > prev && v < exact, "res {res}: {v}");
            prev = v;
        }
        assert!((prev - exact) / exact < 0.03);
    }

    #[test]
    fn ball_rejects_zero_density() {
        assert!(build_ball_mesh(1.0, 1, 0.0).is_err());
        assert!(build_ball_mesh(0.0, 1, 1.0).is_err());
        assert!(build_ball_mesh(1.0, 0, 1.0).is_err());
    }

    #[test]
    fn total_mass_examples() {
        let t = unit_tet(6.0).unwrap();
        assert_relative_eq!(t.total_mass(), 1.0, max_relative = 1e-15);
        let two = ReferenceBody::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z(), Vec3::new(5.0, 0.0, 0.0), Vec3::new(6.0, 0.0, 0.0), Vec3::new(5.0, 1.0, 0.0), Vec3::new(5.0, 0.0, 1.0)],
            vec![[0, 1, 2, 3], [4, 5, 6, 7]],
            vec![6.0, 6.0],
        )
        .unwrap();
        assert_relative_eq!(two.total_mass(), 2.0, max_relative = 1e-15);
        let report = two.validate();
        assert!(!report.connected);
        assert!(!report.passed());
        let cube = build_box_mesh([1.0; 3], [2, 2, 2], 3.0).unwrap();
        assert_relative_eq!(cube.total_mass(), 3.0, max_relative = 1e-14);
    }

    #[test]
    fn validate_unit_tet() {
        let t = unit_tet(1.0).unwrap();
        let r = t.validate();
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.rho_min, 1.0);
        assert_relative_eq!(r.total_mass, 1.0 / 6.0);
    }

    #[test]
    fn validate_flags_zero_density() {
        let mut b = build_box_mesh([1.0; 3], [1, 1, 1], 1.0).unwrap();
        b.rho_ref[2] = 0.0;
        let r = b.validate();
        assert!(!r.passed());
        assert!(r.violations.iter().any(|v| v.contains("element 2") && v.contains("rho_ref")));
    }

    #[test]
    fn validate_flags_inverted() {
        let b = ReferenceBody::new(
            vec![Vec3::zeros(), Vec3::x(), Vec3::y(), Vec3::z()],
            vec![[0, 2, 1, 3]],
            vec![1.0],
        )
        .unwrap();
        assert_eq!(b.validate().degenerate_elements, vec![0]);
        assert!(b.element_gradient(&b.reference_state(), 0).is_err());
    }

    #[test]
    fn element_gradient_examples() {
        let b = build_ball_mesh(1.0, 1, 1.0).unwrap();
        let id = b.reference_state();
        let doubled = id.scaled(2.0);
        let shifted = id.translated(&Vec3::new(0.3, -1.0, 2.0));
        for e in 0..b.num_elements() {
            let f = b.element_gradient(&id, e).unwrap();
            assert!((f - Mat3::identity()).amax() < 1e-13);
            let f2 = b.element_gradient(&doubled, e).unwrap();
            assert!((f2 - Mat3::identity() * 2.0).amax() < 1e-13);
            assert!((f2.determinant() - 8.0).abs() < 1e-12);
            let f3 = b.element_gradient(&shifted, e).unwrap();
            assert!((f3 - Mat3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn boundary_of_box() {
        let b = build_box_mesh([1.0; 3], [2, 2, 2], 1.0).unwrap();
        // 6 faces * 4 quads * 2 triangles
        assert_eq!(b.boundary_faces().len(), 48);
        assert_eq!(b.boundary_nodes().len(), 27 - 1);
        // Outward orientation: sum of face normal * centroid = 3 * volume.
        let mut flux = 0.0;
        for f in b.boundary_faces() {
            let [a, c, d] = f.nodes.map(|i| b.nodes()[i]);
            let n = (c - a).cross(&(d - a)) * 0.5;
            flux += n.dot(&((a + c + d) / 3.0));
        }
        assert_relative_eq!(flux, 3.0, max_relative = 1e-12);
    }
}

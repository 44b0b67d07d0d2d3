//! Admissible deformations.
//!
//! `A1` pins the mass-weighted center of mass of the deformed body to a
//! target `a`. The constraint is affine in the nodal positions (barycenter
//! lumping gives node weights `w_n = sum_{e ∋ n} m_e / 4`), so it is kept
//! exactly by projection. `A2` prescribes the positions of every boundary
//! node.
//!
//! Orientation is enforced by the energy barrier; global injectivity is
//! audited afterwards by comparing the summed deformed volume with the
//! voxelized volume of the image.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{bounding_box, DeformationState, Mat3, ReferenceBody, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpaceKind {
    A1,
    A2,
}

impl fmt::Display for SpaceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceKind::A1 => "A1",
            SpaceKind::A2 => "A2",
        })
    }
}

impl FromStr for SpaceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A1" => Ok(SpaceKind::A1),
            "A2" => Ok(SpaceKind::A2),
            other => Err(Error::config("space", format!("expected \"A1\" or \"A2\", got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdmissibleSpec {
    A1 { com_target: Vec3 },
    A2 { boundary_values: BTreeMap<usize, Vec3> },
}

impl AdmissibleSpec {
    pub fn kind(&self) -> SpaceKind {
        match self {
            AdmissibleSpec::A1 { .. } => SpaceKind::A1,
            AdmissibleSpec::A2 { .. } => SpaceKind::A2,
        }
    }

    /// `A1` with the center of mass held at its reference value.
    pub fn a1_reference(body: &ReferenceBody) -> Self {
        AdmissibleSpec::A1 {
            com_target: mass_moment(body, &body.reference_state()),
        }
    }

    /// `A2` spec after checking that the values cover exactly the boundary
    /// nodes and that the prescribed boundary surface does not cross itself.
    pub fn a2(body: &ReferenceBody, boundary_values: BTreeMap<usize, Vec3>) -> Result<Self> {
        let boundary = body.boundary_nodes();
        for &n in &boundary {
            if !boundary_values.contains_key(&n) {
                return Err(Error::MissingBoundaryNode(n));
            }
        }
        if boundary_values.len() != boundary.len() {
            let extra = boundary_values
                .keys()
                .find(|k| boundary.binary_search(k).is_err())
                .copied()
                .unwrap_or_default();
            return Err(Error::NotBoundaryNode(extra));
        }
        let mut positions = body.nodes().to_vec();
        for (&n, p) in &boundary_values {
            positions[n] = *p;
        }
        if let Some((f, g)) = boundary_self_intersection(body, &positions) {
            return Err(Error::invalid(
                "boundary_values",
                format!("prescribed boundary faces {f} and {g} intersect"),
            ));
        }
        Ok(AdmissibleSpec::A2 { boundary_values })
    }

    /// `A2` spec whose boundary values are the trace of `map`.
    pub fn a2_from_map(body: &ReferenceBody, map: impl Fn(&Vec3) -> Vec3) -> Result<Self> {
        let values = body
            .boundary_nodes()
            .into_iter()
            .map(|n| (n, map(&body.nodes()[n])))
            .collect();
        Self::a2(body, values)
    }

    /// Nodes the minimizer may move.
    pub fn free_nodes(&self, body: &ReferenceBody) -> Vec<bool> {
        match self {
            AdmissibleSpec::A1 { .. } => vec![true; body.num_nodes()],
            AdmissibleSpec::A2 { boundary_values } => {
                let mut free = vec![true; body.num_nodes()];
                for &n in boundary_values.keys() {
                    free[n] = false;
                }
                free
            }
        }
    }

    /// Brings a state into the admissible set: projection for `A1`, boundary
    /// pinning for `A2`.
    pub fn enforce(&self, body: &ReferenceBody, state: &DeformationState) -> Result<DeformationState> {
        body.check_state(state)?;
        match self {
            AdmissibleSpec::A1 { com_target } => Ok(project_state_com(body, state, com_target)),
            AdmissibleSpec::A2 { .. } => apply_dirichlet(state, self),
        }
    }

    /// Projects a nodal gradient onto the tangent space of the constraint.
    pub fn project_gradient(&self, body: &ReferenceBody, gradient: &mut [Vec3]) {
        match self {
            AdmissibleSpec::A1 { .. } => project_gradient_com(body, gradient),
            AdmissibleSpec::A2 { boundary_values } => {
                for &n in boundary_values.keys() {
                    gradient[n] = Vec3::zeros();
                }
            }
        }
    }
}

/// Node weights of the lumped center-of-mass functional; they sum to `M`.
pub fn node_weights(body: &ReferenceBody) -> Vec<f64> {
    let mut w = vec![0.0; body.num_nodes()];
    for (tet, m) in body.elements().iter().zip(body.element_masses()) {
        for &n in tet {
            w[n] += 0.25 * m;
        }
    }
    w
}

/// `sum_e m_e * barycenter_e` of the deformed state.
pub fn mass_moment(body: &ReferenceBody, state: &DeformationState) -> Vec3 {
    body.barycenters(state)
        .iter()
        .zip(body.element_masses())
        .map(|(x, m)| x * m)
        .sum()
}

/// Translates the state by `d = (a - sum_e m_e x_e) / M`.
pub fn project_state_com(body: &ReferenceBody, state: &DeformationState, target: &Vec3) -> DeformationState {
    let d = (target - mass_moment(body, state)) / body.total_mass();
    state.translated(&d)
}

/// Subtracts the constant vector `c = sum_n w_n g_n / M` from every nodal
/// gradient, so that `sum_n w_n g_n = 0` afterwards.
pub fn project_gradient_com(body: &ReferenceBody, gradient: &mut [Vec3]) {
    let weights = node_weights(body);
    let total: f64 = weights.iter().sum();
    let c: Vec3 = gradient
        .iter()
        .zip(&weights)
        .map(|(g, w)| g * *w)
        .sum::<Vec3>()
        / total;
    for g in gradient.iter_mut() {
        *g -= c;
    }
}

pub fn apply_dirichlet(state: &DeformationState, spec: &AdmissibleSpec) -> Result<DeformationState> {
    let AdmissibleSpec::A2 { boundary_values } = spec else {
        return Err(Error::invalid("spec", "Dirichlet data requires an A2 spec"));
    };
    let mut out = state.clone();
    for (&n, p) in boundary_values {
        *out.positions
            .get_mut(n)
            .ok_or_else(|| Error::invalid("boundary_values", format!("node {n} out of range")))? = *p;
    }
    Ok(out)
}

/// Smallest element determinant of the deformation gradient.
pub fn min_det(body: &ReferenceBody, state: &DeformationState) -> f64 {
    body.deformation_gradients(state)
        .iter()
        .map(Mat3::determinant)
        .fold(f64::INFINITY, f64::min)
}

/// Interior positions solving the graph Laplace problem with the prescribed
/// boundary positions, by conjugate gradients on the interior unknowns.
pub fn harmonic_extension(body: &ReferenceBody, spec: &AdmissibleSpec) -> Result<DeformationState> {
    let free = spec.free_nodes(body);
    let mut state = apply_dirichlet(&body.reference_state(), spec)?;
    let n = body.num_nodes();
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
    for tet in body.elements() {
        for a in 0..4 {
            for b in 0..4 {
                if a != b && !neighbours[tet[a]].contains(&tet[b]) {
                    neighbours[tet[a]].push(tet[b]);
                }
            }
        }
    }
    let unknowns: Vec<usize> = (0..n).filter(|&i| free[i]).collect();
    if unknowns.is_empty() {
        return Ok(state);
    }
    let mut slot = vec![usize::MAX; n];
    for (k, &i) in unknowns.iter().enumerate() {
        slot[i] = k;
    }
    let apply = |x: &[Vec3], out: &mut [Vec3]| {
        for (k, &i) in unknowns.iter().enumerate() {
            let mut v = x[k] * neighbours[i].len() as f64;
            for &j in &neighbours[i] {
                if slot[j] != usize::MAX {
                    v -= x[slot[j]];
                }
            }
            out[k] = v;
        }
    };
    // rhs: contributions of pinned neighbours.
    let b: Vec<Vec3> = unknowns
        .iter()
        .map(|&i| {
            neighbours[i]
                .iter()
                .filter(|&&j| !free[j])
                .map(|&j| state.positions[j])
                .sum()
        })
        .collect();
    let mut x: Vec<Vec3> = unknowns.iter().map(|&i| body.nodes()[i]).collect();
    let mut ax = vec![Vec3::zeros(); x.len()];
    apply(&x, &mut ax);
    let mut r: Vec<Vec3> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let dot = |u: &[Vec3], v: &[Vec3]| -> Vec3 {
        u.iter().zip(v).map(|(a, b)| a.component_mul(b)).sum()
    };
    let mut rr = dot(&r, &r);
    let tol = 1e-28 * dot(&b, &b).amax().max(1e-300);
    for _ in 0..10 * unknowns.len() + 100 {
        if rr.amax() <= tol {
            break;
        }
        apply(&p, &mut ax);
        let pap = dot(&p, &ax);
        // Components decouple: three independent CG runs in lockstep.
        let alpha = Vec3::from_fn(|k, _| if pap[k] > 0.0 { rr[k] / pap[k] } else { 0.0 });
        for ((xi, pi), (ri, api)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ax)) {
            *xi += pi.component_mul(&alpha);
            *ri -= api.component_mul(&alpha);
        }
        let rr_new = dot(&r, &r);
        let beta = Vec3::from_fn(|k, _| if rr[k] > 0.0 { rr_new[k] / rr[k] } else { 0.0 });
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + pi.component_mul(&beta);
        }
        rr = rr_new;
    }
    for (k, &i) in unknowns.iter().enumerate() {
        state.positions[i] = x[k];
    }
    Ok(state)
}

/// Result of the discrete injectivity audit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectivityReport {
    /// `sum_e det(F_e) vol_e - union_volume`.
    pub gap: f64,
    /// Surface area of the deformed boundary times the voxel size.
    pub voxel_error_bound: f64,
    pub deformed_volume: f64,
    pub union_volume: f64,
    pub voxel_size: f64,
    pub resolution: usize,
}

impl InjectivityReport {
    pub fn certifies_injectivity(&self) -> bool {
        self.gap <= self.voxel_error_bound
    }
}

pub const DEFAULT_VOXEL_RESOLUTION: usize = 128;

struct TetLocator {
    origin: Vec3,
    inverse: Mat3,
    lo: Vec3,
    hi: Vec3,
}

impl TetLocator {
    fn new(p: [Vec3; 4]) -> Option<Self> {
        let m = Mat3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
        let inverse = m.try_inverse()?;
        let (lo, hi) = bounding_box(&p);
        Some(Self {
            origin: p[0],
            inverse,
            lo,
            hi,
        })
    }

    #[inline]
    fn contains(&self, x: &Vec3) -> bool {
        const TOL: f64 = 1e-12;
        let l = self.inverse * (x - self.origin);
        l.x >= -TOL && l.y >= -TOL && l.z >= -TOL && l.x + l.y + l.z <= 1.0 + TOL
    }
}

/// Compares `sum_e det(F_e) vol_e` with the measure of the union of deformed
/// elements, estimated by testing voxel centres of a `resolution^3` grid over
/// the deformed bounding box. A gap near zero certifies that almost every
/// image point has one preimage; a positive gap measures the overlap.
pub fn injectivity_gap(body: &ReferenceBody, state: &DeformationState, resolution: usize) -> Result<InjectivityReport> {
    body.check_state(state)?;
    if resolution < 8 {
        return Err(Error::VoxelResolution(resolution));
    }
    let dets: Vec<f64> = body.deformation_gradients(state).iter().map(Mat3::determinant).collect();
    if let Some((e, &d)) = dets.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
        return Err(Error::Infeasible { element: e, det: d });
    }
    let deformed_volume: f64 = dets.iter().zip(body.volumes()).map(|(d, v)| d * v).sum();

    let (lo, hi) = bounding_box(&state.positions);
    let ext = hi - lo;
    let h = ext / resolution as f64;
    let locators: Vec<TetLocator> = body
        .elements()
        .iter()
        .filter_map(|tet| TetLocator::new(tet.map(|i| state.positions[i])))
        .collect();

    let index_range = |a: f64, b: f64, origin: f64, step: f64| -> (usize, usize) {
        if step == 0.0 {
            return (0, resolution);
        }
        let first = ((a - origin) / step - 0.5).ceil().max(0.0) as usize;
        let last = (((b - origin) / step - 0.5).floor() as isize + 1).clamp(0, resolution as isize) as usize;
        (first.min(resolution), last)
    };

    // One z-slab per task; slabs are summed in order.
    let counts: Vec<usize> = (0..resolution)
        .into_par_iter()
        .map(|k| {
            let z = lo.z + (k as f64 + 0.5) * h.z;
            let mut occupied = vec![false; resolution * resolution];
            for t in &locators {
                if z < t.lo.z || z > t.hi.z {
                    continue;
                }
                let (i0, i1) = index_range(t.lo.x, t.hi.x, lo.x, h.x);
                let (j0, j1) = index_range(t.lo.y, t.hi.y, lo.y, h.y);
                for j in j0..j1 {
                    let y = lo.y + (j as f64 + 0.5) * h.y;
                    for i in i0..i1 {
                        let cell = &mut occupied[i + resolution * j];
                        if !*cell {
                            let x = lo.x + (i as f64 + 0.5) * h.x;
                            *cell = t.contains(&Vec3::new(x, y, z));
                        }
                    }
                }
            }
            occupied.iter().filter(|&&o| o).count()
        })
        .collect();
    let voxels: usize = counts.iter().sum();
    let union_volume = voxels as f64 * h.x * h.y * h.z;

    let area: f64 = body
        .boundary_faces()
        .iter()
        .map(|f| {
            let [a, b, c] = f.nodes.map(|i| state.positions[i]);
            0.5 * (b - a).cross(&(c - a)).norm()
        })
        .sum();
    let voxel_size = h.amax();
    Ok(InjectivityReport {
        gap: deformed_volume - union_volume,
        voxel_error_bound: area * voxel_size,
        deformed_volume,
        union_volume,
        voxel_size,
        resolution,
    })
}

fn segment_hits_triangle(p: &Vec3, q: &Vec3, tri: &[Vec3; 3]) -> bool {
    const EPS: f64 = 1e-12;
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let dir = q - p;
    let h = dir.cross(&e2);
    let a = e1.dot(&h);
    if a.abs() < EPS * e1.norm() * e2.norm() * dir.norm() {
        return false;
    }
    let f = 1.0 / a;
    let s = p - tri[0];
    let u = f * s.dot(&h);
    if !(EPS..=1.0 - EPS).contains(&u) {
        return false;
    }
    let qv = s.cross(&e1);
    let v = f * dir.dot(&qv);
    if v < EPS || u + v > 1.0 - EPS {
        return false;
    }
    let t = f * e2.dot(&qv);
    t > EPS && t < 1.0 - EPS
}

/// First pair of boundary faces (by index) that do not share a vertex and
/// whose images cross, if any.
pub fn boundary_self_intersection(body: &ReferenceBody, positions: &[Vec3]) -> Option<(usize, usize)> {
    let faces = body.boundary_faces();
    let tris: Vec<[Vec3; 3]> = faces.iter().map(|f| f.nodes.map(|i| positions[i])).collect();
    let boxes: Vec<(Vec3, Vec3)> = tris.iter().map(|t| bounding_box(t)).collect();
    for a in 0..faces.len() {
        for b in a + 1..faces.len() {
            if faces[a].nodes.iter().any(|n| faces[b].nodes.contains(n)) {
                continue;
            }
            let (la, ha) = boxes[a];
            let (lb, hb) = boxes[b];
            if (0..3).any(|k| ha[k] < lb[k] || hb[k] < la[k]) {
                continue;
            }
            let crosses = |s: &[Vec3; 3], t: &[Vec3; 3]| {
                (0..3).any(|i| segment_hits_triangle(&s[i], &s[(i + 1) % 3], t))
            };
            if crosses(&tris[a], &tris[b]) || crosses(&tris[b], &tris[a]) {
                return Some((a, b));
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_ball_mesh, build_box_mesh, unit_tet};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn com_projection_examples() {
        let body = build_ball_mesh(1.0, 2, 1.3).unwrap();
        let id = body.reference_state();
        let com = mass_moment(&body, &id);
        let same = project_state_com(&body, &id, &com);
        for (a, b) in same.positions.iter().zip(&id.positions) {
            assert!((a - b).norm() < 1e-14);
        }
        let m = body.total_mass();
        let shifted = project_state_com(&body, &id, &(com + Vec3::new(m, 0.0, 0.0)));
        for (a, b) in shifted.positions.iter().zip(&id.positions) {
            assert!((a - b - Vec3::x()).norm() < 1e-13);
        }
        let target = Vec3::new(0.5, -2.0, 1.0);
        let once = project_state_com(&body, &id.scaled(1.3), &target);
        let twice = project_state_com(&body, &once, &target);
        assert!((mass_moment(&body, &once) - target).norm() <= 1e-12 * target.norm());
        for (a, b) in once.positions.iter().zip(&twice.positions) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn gradient_projection_examples() {
        let body = build_ball_mesh(1.0, 1, 1.0).unwrap();
        let n = body.num_nodes();
        let mut constant = vec![Vec3::new(1.0, -2.0, 0.5); n];
        project_gradient_com(&body, &mut constant);
        assert!(constant.iter().all(|g| g.norm() <= 1e-12 * 2.3));

        let mut g = random_field(n, 4);
        project_gradient_com(&body, &mut g);
        let mut again = g.clone();
        project_gradient_com(&body, &mut again);
        for (a, b) in g.iter().zip(&again) {
            assert!((a - b).norm() <= 1e-15);
        }

        let gnorm = g.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        let tau = 1e-3;
        let state = body.reference_state();
        let stepped = DeformationState::new(state.positions.iter().zip(&g).map(|(x, d)| x - d * tau).collect());
        let moved = (mass_moment(&body, &stepped) - mass_moment(&body, &state)).norm();
        assert!(moved <= 1e-10 * tau * gnorm);
    }

    #[test]
    fn gradient_projection_is_linear() {
        let body = build_box_mesh([1.0, 2.0, 1.0], [2, 2, 2], 2.0).unwrap();
        let n = body.num_nodes();
        let (a, b) = (random_field(n, 1), random_field(n, 2));
        let mut sum: Vec<Vec3> = a.iter().zip(&b).map(|(x, y)| x * 2.0 + y).collect();
        let (mut pa, mut pb) = (a.clone(), b.clone());
        project_gradient_com(&body, &mut pa);
        project_gradient_com(&body, &mut pb);
        project_gradient_com(&body, &mut sum);
        for i in 0..n {
            assert!((sum[i] - (pa[i] * 2.0 + pb[i])).norm() < 1e-13);
        }
    }

    #[test]
    fn dirichlet_examples() {
        let body = build_box_mesh([1.0; 3], [2, 2, 2], 1.0).unwrap();
        let spec = AdmissibleSpec::a2_from_map(&body, |x| *x).unwrap();
        let pinned = apply_dirichlet(&body.reference_state().scaled(0.7), &spec).unwrap();
        for n in body.boundary_nodes() {
            assert_eq!(pinned.positions[n], body.nodes()[n]);
        }
        let doubled = AdmissibleSpec::a2_from_map(&body, |x| x * 2.0).unwrap();
        let s = apply_dirichlet(&body.reference_state(), &doubled).unwrap();
        for n in body.boundary_nodes() {
            assert_eq!(s.positions[n], body.nodes()[n] * 2.0);
        }
        // The centre node is interior and untouched.
        let centre = body.nodes().iter().position(|p| (p - Vec3::repeat(0.5)).norm() < 1e-12).unwrap();
        assert_eq!(s.positions[centre], body.nodes()[centre]);

        let mut values: BTreeMap<usize, Vec3> = body.boundary_nodes().into_iter().map(|n| (n, body.nodes()[n])).collect();
        let dropped = *values.keys().nth(3).unwrap();
        values.remove(&dropped);
        match AdmissibleSpec::a2(&body, values) {
            Err(Error::MissingBoundaryNode(n)) => assert_eq!(n, dropped),
            other => panic!("unexpected {other:?}"),
        }
        assert!(apply_dirichlet(&body.reference_state(), &AdmissibleSpec::a1_reference(&body)).is_err());
    }

    #[test]
    fn a2_rejects_crossing_boundary() {
        let body = build_box_mesh([1.0; 3], [1, 1, 1], 1.0).unwrap();
        // Push one top corner through the bottom face.
        let spec = AdmissibleSpec::a2_from_map(&body, |x| {
            if (x - Vec3::new(1.0, 1.0, 1.0)).norm() < 1e-12 {
                Vec3::new(0.2, 0.3, -1.0)
            } else {
                *x
            }
        });
        assert!(spec.is_err());
    }

    #[test]
    fn min_det_examples() {
        let body = build_box_mesh([1.0; 3], [2, 2, 2], 1.0).unwrap();
        assert_relative_eq!(min_det(&body, &body.reference_state()), 1.0, max_relative = 1e-13);
        assert_relative_eq!(min_det(&body, &body.reference_state().scaled(0.5)), 0.125, max_relative = 1e-13);
        let t = unit_tet(1.0).unwrap();
        let reflected = t.reference_state().mapped(|p| Vec3::new(-p.x, p.y, p.z));
        assert!(min_det(&t, &reflected) < 0.0);
    }

    #[test]
    fn mass_conservation_identity() {
        let body = build_ball_mesh(1.0, 2, 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let state = body.reference_state().mapped(|p| p * 1.1 + Vec3::new(rng.gen_range(-0.01..0.01), 0.0, rng.gen_range(-0.01..0.01)));
        let mass: f64 = body
            .deformation_gradients(&state)
            .iter()
            .zip(body.rho_ref().iter().zip(body.volumes()))
            .map(|(f, (r, v))| {
                let d = f.determinant();
                (r / d) * (d * v)
            })
            .sum();
        assert_relative_eq!(mass, body.total_mass(), max_relative = 1e-12);
    }

    #[test]
    fn injectivity_identity_and_dilation() {
        let body = build_ball_mesh(1.0, 2, 1.0).unwrap();
        let r = injectivity_gap(&body, &body.reference_state(), 64).unwrap();
        assert!(r.gap.abs() <= r.voxel_error_bound, "{r:?}");
        let r2 = injectivity_gap(&body, &body.reference_state().scaled(2.0), 64).unwrap();
        assert!(r2.gap.abs() <= r2.voxel_error_bound);
        assert_relative_eq!(r2.deformed_volume, 8.0 * r.deformed_volume, max_relative = 1e-12);
        assert!(matches!(injectivity_gap(&body, &body.reference_state(), 7), Err(Error::VoxelResolution(7))));
    }

    #[test]
    fn injectivity_overlap_fixture() {
        // Two unit-volume tets, deformed onto the same image.
        let s = 6f64.cbrt();
        let tet = [Vec3::zeros(), Vec3::x() * s, Vec3::y() * s, Vec3::z() * s];
        let shift = Vec3::new(10.0, 0.0, 0.0);
        let mut nodes = tet.to_vec();
        nodes.extend(tet.iter().map(|p| p + shift));
        let body = ReferenceBody::new(nodes, vec![[0, 1, 2, 3], [4, 5, 6, 7]], vec![1.0, 1.0]).unwrap();
        let mut positions = tet.to_vec();
        positions.extend(tet);
        let r = injectivity_gap(&body, &DeformationState::new(positions), 128).unwrap();
        assert_relative_eq!(r.deformed_volume, 2.0, max_relative = 1e-12);
        assert!((r.gap - 1.0).abs() <= r.voxel_error_bound, "{r:?}");
        assert!(!r.certifies_injectivity());
    }

    #[test]
    fn injectivity_rigid_motion() {
        let body = build_box_mesh([1.0, 0.6, 0.8], [3, 2, 2], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = crate::material::random_rotation(&mut rng);
        let moved = body.reference_state().mapped(|p| q * p + Vec3::new(3.0, -1.0, 0.5));
        let a = injectivity_gap(&body, &body.reference_state(), 96).unwrap();
        let b = injectivity_gap(&body, &moved, 96).unwrap();
        assert!((a.gap - b.gap).abs() <= a.voxel_error_bound + b.voxel_error_bound);
    }

    #[test]
    fn harmonic_extension_of_affine_data() {
        let body = build_box_mesh([1.0; 3], [3, 3, 3], 1.0).unwrap();
        let spec = AdmissibleSpec::a2_from_map(&body, |x| x * 1.5 + Vec3::new(0.1, 0.0, 0.0)).unwrap();
        let s = harmonic_extension(&body, &spec).unwrap();
        assert!(min_det(&body, &s) > 0.0);
        // On a uniform grid the graph Laplacian does not reproduce affine maps
        // exactly, but interior points stay inside the image box.
        for p in &s.positions {
            assert!(p.x >= 0.1 - 1e-9 && p.x <= 1.6 + 1e-9);
        }
        let t = unit_tet(1.0).unwrap();
        let spec = AdmissibleSpec::a2_from_map(&t, |x| *x).unwrap();
        assert_eq!(harmonic_extension(&t, &spec).unwrap(), t.reference_state());
    }
}

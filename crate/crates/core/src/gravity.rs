//! Lumped-mass discretization of the self-gravitational energy
//!
//! ```text
//! E_pot = -(G/2) sum_{e != f} m_e m_f / sqrt(|x_e - x_f|^2 + eps^2)
//! ```
//!
//! where `x_e` are deformed element barycenters and `m_e = rho_ref_e vol_e`.
//! Both kernels compute per-target potentials and forces (in parallel when
//! allowed) and then reduce them sequentially in index order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{bounding_box, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct MassCloud {
    pub points: Vec<Vec3>,
    pub masses: Vec<f64>,
}

impl MassCloud {
    pub fn new(points: Vec<Vec3>, masses: Vec<f64>) -> Result<Self> {
        if points.len() != masses.len() {
            return Err(Error::invalid(
                "masses",
                format!("{} masses for {} points", masses.len(), points.len()),
            ));
        }
        if let Some(m) = masses.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::invalid("masses", format!("mass {m} is not positive")));
        }
        Ok(Self { points, masses })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Kernel parameters shared by the direct and tree evaluations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GravityParams {
    pub coupling: f64,
    pub softening: f64,
    /// Evaluate targets sequentially.
    pub deterministic: bool,
}

impl Default for GravityParams {
    fn default() -> Self {
        Self {
            coupling: 1.0,
            softening: 0.0,
            deterministic: true,
        }
    }
}

impl GravityParams {
    pub fn new(coupling: f64) -> Self {
        Self {
            coupling,
            ..Self::default()
        }
    }
}

/// Energy together with `dE/dx_e` for every point.
#[derive(Debug, Clone, PartialEq)]
pub struct GravityEval {
    pub energy: f64,
    pub gradient: Vec<Vec3>,
}

/// Potential `sum m_f / r` and `sum m_f (x - x_f) / r^3` felt by one target.
#[derive(Debug, Clone, Copy, Default)]
struct Field {
    potential: f64,
    pull: Vec3,
}

#[inline]
fn pair(
    field: &mut Field,
    target: &Vec3,
    source: &Vec3,
    mass: f64,
    eps2: f64,
    ids: (usize, usize),
) -> Result<()> {
    let d = target - source;
    let r2 = d.norm_squared() + eps2;
    if r2 == 0.0 {
        return Err(Error::CoincidentPoints(ids.0.min(ids.1), ids.0.max(ids.1)));
    }
    let inv_r = r2.sqrt().recip();
    field.potential += mass * inv_r;
    field.pull += d * (mass * inv_r * inv_r * inv_r);
    Ok(())
}

fn map_targets<F>(n: usize, deterministic: bool, f: F) -> Result<Vec<Field>>
where
    F: Fn(usize) -> Result<Field> + Sync + Send,
{
    if deterministic {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

fn reduce(cloud: &MassCloud, fields: &[Field], coupling: f64, with_gradient: bool) -> GravityEval {
    let mut energy = 0.0;
    for (m, fl) in cloud.masses.iter().zip(fields) {
        energy += m * fl.potential;
    }
    let gradient = if with_gradient {
        cloud
            .masses
            .iter()
            .zip(fields)
            .map(|(m, fl)| fl.pull * (coupling * m))
            .collect()
    } else {
        Vec::new()
    };
    GravityEval {
        energy: -0.5 * coupling * energy,
        gradient,
    }
}

fn direct_fields(cloud: &MassCloud, params: &GravityParams) -> Result<Vec<Field>> {
    let eps2 = params.softening * params.softening;
    map_targets(cloud.len(), params.deterministic, |i| {
        let mut field = Field::default();
        let xi = &cloud.points[i];
        for (j, (xj, mj)) in cloud.points.iter().zip(&cloud.masses).enumerate() {
            if i != j {
                pair(&mut field, xi, xj, *mj, eps2, (i, j))?;
            }
        }
        Ok(field)
    })
}

pub fn potential_energy_direct(cloud: &MassCloud, params: &GravityParams) -> Result<f64> {
    if params.coupling == 0.0 {
        return Ok(0.0);
    }
    let fields = direct_fields(cloud, params)?;
    Ok(reduce(cloud, &fields, params.coupling, false).energy)
}

/// `dE_pot/dx_e = G sum_{f != e} m_e m_f (x_e - x_f) / (|x_e - x_f|^2 + eps^2)^(3/2)`.
pub fn gravity_gradient_direct(cloud: &MassCloud, params: &GravityParams) -> Result<Vec<Vec3>> {
    Ok(gravity_direct(cloud, params)?.gradient)
}

pub fn gravity_direct(cloud: &MassCloud, params: &GravityParams) -> Result<GravityEval> {
    let fields = direct_fields(cloud, params)?;
    Ok(reduce(cloud, &fields, params.coupling, true))
}

#[derive(Debug, Clone)]
struct Cell {
    center: Vec3,
    half: f64,
    mass: f64,
    com: Vec3,
    /// Range into `Octree::order`.
    start: usize,
    end: usize,
    /// Index of the first child; children are stored contiguously.
    children: Option<(usize, usize)>,
}

/// Barnes-Hut octree over a [`MassCloud`] with monopole cells.
#[derive(Debug, Clone)]
pub struct Octree {
    cells: Vec<Cell>,
    order: Vec<usize>,
    /// Position of each point in `order`.
    slot: Vec<usize>,
    leaf_capacity: usize,
}

const MAX_DEPTH: usize = 48;

impl Octree {
    pub fn build(cloud: &MassCloud, leaf_capacity: usize) -> Result<Self> {
        if leaf_capacity == 0 {
            return Err(Error::invalid("leaf_capacity", "must be at least 1"));
        }
        if cloud.is_empty() {
            return Err(Error::invalid("cloud", "cannot build a tree over no points"));
        }
        let (lo, hi) = bounding_box(&cloud.points);
        let center = (lo + hi) * 0.5;
        let half = 0.5 * (hi - lo).amax() * (1.0 + 1e-12) + f64::MIN_POSITIVE;
        let mut tree = Octree {
            cells: Vec::new(),
            order: (0..cloud.len()).collect(),
            slot: vec![0; cloud.len()],
            leaf_capacity,
        };
        tree.cells.push(Cell {
            center,
            half,
            mass: 0.0,
            com: Vec3::zeros(),
            start: 0,
            end: cloud.len(),
            children: None,
        });
        tree.split(cloud, 0, 0);
        for (pos, &i) in tree.order.iter().enumerate() {
            tree.slot[i] = pos;
        }
        Ok(tree)
    }

    fn split(&mut self, cloud: &MassCloud, cell: usize, depth: usize) {
        let Cell {
            center,
            half,
            start,
            end,
            ..
        } = self.cells[cell].clone();
        let mut mass = 0.0;
        let mut moment = Vec3::zeros();
        for &i in &self.order[start..end] {
            mass += cloud.masses[i];
            moment += cloud.points[i] * cloud.masses[i];
        }
        self.cells[cell].mass = mass;
        self.cells[cell].com = moment / mass;
        if end - start <= self.leaf_capacity || depth >= MAX_DEPTH {
            return;
        }

        let octant = |p: &Vec3| {
            (p.x >= center.x) as usize | ((p.y >= center.y) as usize) << 1 | ((p.z >= center.z) as usize) << 2
        };
        self.order[start..end].sort_by_key(|&i| octant(&cloud.points[i]));

        let first = self.cells.len();
        let mut cursor = start;
        let quarter = 0.5 * half;
        for oct in 0..8 {
            let len = self.order[cursor..end]
                .iter()
                .take_while(|&&i| octant(&cloud.points[i]) == oct)
                .count();
            let offset = Vec3::new(
                if oct & 1 != 0 { quarter } else { -quarter },
                if oct & 2 != 0 { quarter } else { -quarter },
                if oct & 4 != 0 { quarter } else { -quarter },
            );
            self.cells.push(Cell {
                center: center + offset,
                half: quarter,
                mass: 0.0,
                com: Vec3::zeros(),
                start: cursor,
                end: cursor + len,
                children: None,
            });
            cursor += len;
        }
        self.cells[cell].children = Some((first, first + 8));
        for child in first..first + 8 {
            if self.cells[child].end > self.cells[child].start {
                self.split(cloud, child, depth + 1);
            }
        }
    }

    pub fn num_points(&self) -> usize {
        self.order.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn leaf_capacity(&self) -> usize {
        self.leaf_capacity
    }

    /// Total mass and center of mass of the root cell.
    pub fn root_moments(&self) -> (f64, Vec3) {
        (self.cells[0].mass, self.cells[0].com)
    }

    fn check(&self, cloud: &MassCloud) -> Result<()> {
        if self.order.len() != cloud.len() {
            return Err(Error::StaleTree {
                built: self.order.len(),
                given: cloud.len(),
            });
        }
        Ok(())
    }

    fn field_at(&self, cloud: &MassCloud, target: usize, theta: f64, eps2: f64) -> Result<Field> {
        let x = &cloud.points[target];
        let slot = self.slot[target];
        let mut field = Field::default();
        let mut stack = vec![0usize];
        while let Some(c) = stack.pop() {
            let cell = &self.cells[c];
            if cell.end == cell.start {
                continue;
            }
            let contains_target = (cell.start..cell.end).contains(&slot);
            let d = x - cell.com;
            let dist = d.norm();
            if !contains_target && 2.0 * cell.half < theta * dist {
                let r2 = dist * dist + eps2;
                let inv_r = r2.sqrt().recip();
                field.potential += cell.mass * inv_r;
                field.pull += d * (cell.mass * inv_r * inv_r * inv_r);
                continue;
            }
            match cell.children {
                Some((first, last)) => stack.extend((first..last).rev()),
                None => {
                    for &j in &self.order[cell.start..cell.end] {
                        if j != target {
                            pair(&mut field, x, &cloud.points[j], cloud.masses[j], eps2, (target, j))?;
                        }
                    }
                }
            }
        }
        Ok(field)
    }

    fn fields(&self, cloud: &MassCloud, theta: f64, params: &GravityParams) -> Result<Vec<Field>> {
        self.check(cloud)?;
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::invalid("theta", format!("must lie in (0, 1), got {theta}")));
        }
        let eps2 = params.softening * params.softening;
        map_targets(cloud.len(), params.deterministic, |i| self.field_at(cloud, i, theta, eps2))
    }
}

pub fn build_octree(cloud: &MassCloud, leaf_capacity: usize) -> Result<Octree> {
    Octree::build(cloud, leaf_capacity)
}

/// Barnes-Hut energy: a cell is replaced by its monopole when
/// `size / distance(target, com) < theta` and it does not contain the target.
pub fn potential_energy_tree(cloud: &MassCloud, tree: &Octree, theta: f64, params: &GravityParams) -> Result<f64> {
    let fields = tree.fields(cloud, theta, params)?;
    Ok(reduce(cloud, &fields, params.coupling, false).energy)
}

pub fn gravity_gradient_tree(cloud: &MassCloud, tree: &Octree, theta: f64, params: &GravityParams) -> Result<Vec<Vec3>> {
    Ok(gravity_tree(cloud, tree, theta, params)?.gradient)
}

pub fn gravity_tree(cloud: &MassCloud, tree: &Octree, theta: f64, params: &GravityParams) -> Result<GravityEval> {
    let fields = tree.fields(cloud, theta, params)?;
    Ok(reduce(cloud, &fields, params.coupling, true))
}

/// Kernel selection: `theta == 0` means direct summation.
pub fn evaluate(cloud: &MassCloud, theta: f64, leaf_capacity: usize, params: &GravityParams) -> Result<GravityEval> {
    if params.coupling == 0.0 {
        return Ok(GravityEval {
            energy: 0.0,
            gradient: vec![Vec3::zeros(); cloud.len()],
        });
    }
    if theta == 0.0 {
        gravity_direct(cloud, params)
    } else {
        let tree = Octree::build(cloud, leaf_capacity)?;
        gravity_tree(cloud, &tree, theta, params)
    }
}

/// Uniform random points in a ball, equal masses summing to one.
pub fn random_ball_cloud(n: usize, radius: f64, seed: u64) -> MassCloud {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let p = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        if p.norm_squared() <= 1.0 {
            points.push(p * radius);
        }
    }
    MassCloud {
        points,
        masses: vec![1.0 / n as f64; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::random_rotation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> MassCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let masses = (0..n).map(|_| rng.gen_range(0.5..2.0)).collect();
        MassCloud::new(points, masses).unwrap()
    }

    fn two_body() -> MassCloud {
        MassCloud::new(vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn two_body_energy_and_gradient() {
        let p = GravityParams::new(1.0);
        assert_relative_eq!(potential_energy_direct(&two_body(), &p).unwrap(), -0.5, max_relative = 1e-15);
        let g = gravity_gradient_direct(&two_body(), &p).unwrap();
        assert_relative_eq!(g[0].x, -0.25, max_relative = 1e-15);
        // Central differences of the energy at point 0.
        let h = 1e-6;
        let mut c = two_body();
        c.points[0].x += h;
        let ep = potential_energy_direct(&c, &p).unwrap();
        c.points[0].x -= 2.0 * h;
        let em = potential_energy_direct(&c, &p).unwrap();
        assert!(((ep - em) / (2.0 * h) - g[0].x).abs() < 1e-9);
        assert_eq!(g[1], -g[0]);
    }

    #[test]
    fn zero_coupling() {
        let c = random_cloud(20, 1);
        assert_eq!(potential_energy_direct(&c, &GravityParams::new(0.0)).unwrap(), 0.0);
    }

    #[test]
    fn regular_tetrahedron() {
        let pts = vec![
            Vec3::new(1.0, 1.0, 1.0),
            Vec3::new(1.0, -1.0, -1.0),
            Vec3::new(-1.0, 1.0, -1.0),
            Vec3::new(-1.0, -1.0, 1.0),
        ];
        let edge = (pts[0] - pts[1]).norm();
        let c = MassCloud::new(pts.iter().map(|p| p / edge).collect(), vec![1.0; 4]).unwrap();
        assert_relative_eq!(potential_energy_direct(&c, &GravityParams::new(1.0)).unwrap(), -6.0, max_relative = 1e-14);
    }

    #[test]
    fn coincident_points_named() {
        let c = MassCloud::new(vec![Vec3::zeros(), Vec3::x(), Vec3::zeros()], vec![1.0; 3]).unwrap();
        match potential_energy_direct(&c, &GravityParams::new(1.0)) {
            Err(Error::CoincidentPoints(0, 2)) => {}
            other => panic!("unexpected {other:?}"),
        }
        let soft = GravityParams { softening: 0.1, ..GravityParams::new(1.0) };
        assert!(potential_energy_direct(&c, &soft).unwrap().is_finite());
        let tree = Octree::build(&c, 1).unwrap();
        assert!(matches!(potential_energy_tree(&c, &tree, 0.5, &GravityParams::new(1.0)), Err(Error::CoincidentPoints(0, 2))));
    }

    #[test]
    fn mirror_pair() {
        let c = MassCloud::new(vec![Vec3::new(0.3, -0.2, 0.7), Vec3::new(-0.3, 0.2, -0.7)], vec![1.5, 1.5]).unwrap();
        let g = gravity_gradient_direct(&c, &GravityParams::new(1.0)).unwrap();
        assert_eq!(g[0], -g[1]);
    }

    #[test]
    fn momentum_balance() {
        let c = random_cloud(80, 5);
        let g = gravity_gradient_direct(&c, &GravityParams::new(1.0)).unwrap();
        let sum: Vec3 = g.iter().sum();
        let scale: f64 = g.iter().map(|v| v.norm()).sum();
        assert!(sum.norm() <= 1e-12 * scale);
    }

    #[test]
    fn octree_moments() {
        let c = random_cloud(300, 9);
        let tree = Octree::build(&c, 4).unwrap();
        let (m, com) = tree.root_moments();
        assert_relative_eq!(m, c.total_mass(), max_relative = 1e-13);
        let expect: Vec3 = c.points.iter().zip(&c.masses).map(|(p, m)| p * *m).sum::<Vec3>() / c.total_mass();
        assert!((com - expect).norm() < 1e-13);
        for cell in &tree.cells {
            if let Some((a, b)) = cell.children {
                let child_mass: f64 = tree.cells[a..b].iter().map(|c| c.mass).sum();
                assert_relative_eq!(child_mass, cell.mass, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn tree_tiny_theta_matches_direct() {
        let c = random_cloud(50, 2);
        let p = GravityParams::new(1.0);
        let tree = Octree::build(&c, 1).unwrap();
        let direct = gravity_direct(&c, &p).unwrap();
        let approx = gravity_tree(&c, &tree, 1e-6, &p).unwrap();
        assert!(((approx.energy - direct.energy) / direct.energy).abs() <= 1e-10);
        for (a, b) in approx.gradient.iter().zip(&direct.gradient) {
            assert!((a - b).norm() <= 1e-10 * b.norm().max(1e-300));
        }
    }

    #[test]
    fn two_points_exact_any_theta() {
        let c = two_body();
        let tree = Octree::build(&c, 1).unwrap();
        for theta in [0.1, 0.5, 0.99] {
            let e = potential_energy_tree(&c, &tree, theta, &GravityParams::new(1.0)).unwrap();
            assert_eq!(e, -0.5);
        }
    }

    #[test]
    fn stale_tree_and_bad_theta() {
        let c = random_cloud(10, 3);
        let tree = Octree::build(&c, 2).unwrap();
        let other = random_cloud(11, 3);
        assert!(matches!(potential_energy_tree(&other, &tree, 0.5, &GravityParams::new(1.0)), Err(Error::StaleTree { built: 10, given: 11 })));
        assert!(potential_energy_tree(&c, &tree, 1.0, &GravityParams::new(1.0)).is_err());
        assert!(potential_energy_tree(&c, &tree, 0.0, &GravityParams::new(1.0)).is_err());
    }

    #[test]
    fn tree_error_envelope_in_theta() {
        let c = random_ball_cloud(1000, 1.0, 4);
        let p = GravityParams::new(1.0);
        let exact = potential_energy_direct(&c, &p).unwrap();
        let tree = Octree::build(&c, 8).unwrap();
        let mut errors = Vec::new();
        for theta in [0.9, 0.7, 0.5, 0.3, 0.1] {
            let e = potential_energy_tree(&c, &tree, theta, &p).unwrap();
            errors.push(((e - exact) / exact).abs());
        }
        // Running maximum from the small-theta end must be non-increasing as
        // theta decreases.
        let envelope: Vec<f64> = errors
            .iter()
            .rev()
            .scan(0.0f64, |m, &e| {
                *m = m.max(e);
                Some(*m)
            })
            .collect();
        assert!(envelope.windows(2).all(|w| w[0] <= w[1]));
        assert!(errors[0] >= errors[4]);
        assert!(errors[3] <= 1e-3);
    }

    #[test]
    fn parallel_matches_sequential() {
        let c = random_cloud(200, 8);
        let seq = GravityParams::new(1.0);
        let par = GravityParams { deterministic: false, ..seq };
        assert_eq!(gravity_direct(&c, &seq).unwrap(), gravity_direct(&c, &par).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn energy_negative_and_invariant(seed in any::<u64>(), lambda in 0.1f64..10.0) {
            let c = random_cloud(30, seed);
            let p = GravityParams::new(1.0);
            let e = potential_energy_direct(&c, &p).unwrap();
            prop_assert!(e < 0.0);

            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let q = random_rotation(&mut rng);
            let rotated = MassCloud { points: c.points.iter().map(|x| q * x).collect(), ..c.clone() };
            let er = potential_energy_direct(&rotated, &p).unwrap();
            prop_assert!(((er - e) / e).abs() <= 1e-12);

            let dilated = MassCloud { points: c.points.iter().map(|x| x * lambda).collect(), ..c.clone() };
            let ed = potential_energy_direct(&dilated, &p).unwrap();
            prop_assert!(((ed - e / lambda) / e * lambda).abs() <= 1e-12);
        }

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>()) {
            let c = random_cloud(12, seed);
            let p = GravityParams::new(1.0);
            let g = gravity_gradient_direct(&c, &p).unwrap();
            let gmax = g.iter().map(|v| v.amax()).fold(0.0, f64::max);
            let h = 1e-6;
            for i in 0..c.len() {
                for k in 0..3 {
                    let mut cp = c.clone();
                    cp.points[i][k] += h;
                    let mut cm = c.clone();
                    cm.points[i][k] -= h;
                    let fd = (potential_energy_direct(&cp, &p).unwrap() - potential_energy_direct(&cm, &p).unwrap()) / (2.0 * h);
                    prop_assert!((fd - g[i][k]).abs() <= 1e-6 * gmax);
                }
            }
        }
    }
}

//! Run configuration, mesh and solution files.
//!
//! Configs are TOML with four tables, `[mesh]`, `[material]`, `[space]` and
//! `[solver]`, plus the top-level keys `seed` and `out`. Relative paths are
//! resolved against the directory of the config file.
//!
//! ```toml
//! seed = 7
//!
//! [mesh]
//! generator = "ball(1.0, 2)"
//! density = 1.0
//!
//! [material]
//! a = [1.0]
//! gamma = [2.0]
//! b = [1.0]
//! delta = [2.0]
//! barrier_s = 9.0
//!
//! [space]
//! space = "A1"
//!
//! [solver]
//! G = 1.0
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::admissible::{self, AdmissibleSpec, SpaceKind, DEFAULT_VOXEL_RESOLUTION};
use crate::diagnostics::DiagnosticsReport;
use crate::error::{Error, Result};
use crate::material::{Barrier, OgdenMaterial, PowerTerm};
use crate::mesh::{build_ball_mesh, build_box_mesh, DeformationState, Mat3, ReferenceBody, Vec3};
use crate::minimize::{IterationRecord, Solution, SolverConfig};

pub const MESH_HEADER: &str = "gravelast-mesh v1";

/// Where the reference body comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MeshSource {
    File(PathBuf),
    Ball { radius: f64, resolution: usize },
    Box { extents: [f64; 3], subdivisions: [usize; 3] },
}

impl MeshSource {
    /// Parses `ball(radius, resolution)` or `box(lx, ly, lz, nx, ny, nz)`.
    pub fn parse_generator(text: &str) -> Result<Self> {
        let text = text.trim();
        let bad = |msg: &str| Error::config("mesh.generator", format!("{msg} in `{text}`"));
        let open = text.find('(').ok_or_else(|| bad("expected `name(args)`"))?;
        if !text.ends_with(')') {
            return Err(bad("missing closing parenthesis"));
        }
        let name = text[..open].trim();
        let args: Vec<&str> = text[open + 1..text.len() - 1].split(',').map(str::trim).collect();
        let float = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
        let count = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("`{s}` is not a non-negative integer")));
        match (name, args.len()) {
            ("ball", 2) => Ok(MeshSource::Ball {
                radius: float(args[0])?,
                resolution: count(args[1])?,
            }),
            ("box", 6) => Ok(MeshSource::Box {
                extents: [float(args[0])?, float(args[1])?, float(args[2])?],
                subdivisions: [count(args[3])?, count(args[4])?, count(args[5])?],
            }),
            ("ball", _) => Err(bad("ball takes (radius, resolution)")),
            ("box", _) => Err(bad("box takes (lx, ly, lz, nx, ny, nz)")),
            _ => Err(bad(&format!("unknown generator `{name}`"))),
        }
    }

    fn generator_string(&self) -> Option<String> {
        match self {
            MeshSource::File(_) => None,
            MeshSource::Ball { radius, resolution } => Some(format!("ball({radius:?}, {resolution})")),
            MeshSource::Box { extents, subdivisions } => Some(format!(
                "box({:?}, {:?}, {:?}, {}, {}, {})",
                extents[0], extents[1], extents[2], subdivisions[0], subdivisions[1], subdivisions[2]
            )),
        }
    }
}

/// Material block. When `barrier_c1` is absent the barrier coefficient is
/// chosen so that the reference state is stress free.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialConfig {
    pub a: Vec<f64>,
    pub gamma: Vec<f64>,
    pub b: Vec<f64>,
    pub delta: Vec<f64>,
    pub barrier_s: f64,
    pub barrier_c1: Option<f64>,
    pub kappa: f64,
}

impl MaterialConfig {
    pub fn build(&self) -> Result<OgdenMaterial> {
        let stretch = zip_terms(&self.a, &self.gamma, "a", "gamma")?;
        let cofactor = zip_terms(&self.b, &self.delta, "b", "delta")?;
        let built = match self.barrier_c1 {
            Some(c1) => OgdenMaterial::new(stretch, cofactor, Barrier::new(c1, self.barrier_s).with_kappa(self.kappa)),
            None => OgdenMaterial::stress_free(stretch, cofactor, self.barrier_s, self.kappa),
        };
        built.map_err(|e| match e {
            Error::InvalidArgument { name, reason } => Error::config(format!("material.{name}"), reason),
            other => other,
        })
    }
}

fn zip_terms(coeffs: &[f64], exps: &[f64], ck: &str, ek: &str) -> Result<Vec<PowerTerm>> {
    if coeffs.len() != exps.len() {
        return Err(Error::config(
            format!("material.{ek}"),
            format!("has {} entries but `{ck}` has {}", exps.len(), coeffs.len()),
        ));
    }
    for (key, values) in [(ck, coeffs), (ek, exps)] {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::config(format!("material.{key}"), format!("entries must be positive, got {v}")));
        }
    }
    Ok(coeffs.iter().zip(exps).map(|(&c, &e)| PowerTerm::new(c, e)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaceConfig {
    pub kind: SpaceKind,
    /// Mass moment `sum_e m_e x_e` the `A1` deformations keep; the
    /// reference one when absent.
    pub com_target: Option<Vec3>,
    /// Boundary values for `A2`, lines `node x y z`.
    pub boundary_file: Option<PathBuf>,
    /// Without a boundary file, `A2` pins the boundary to the reference
    /// boundary scaled by this factor about the reference center of mass.
    pub boundary_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mesh: MeshSource,
    /// Density of generated meshes. Mesh files carry their own.
    pub density: f64,
    pub material: MaterialConfig,
    pub space: SpaceConfig,
    pub solver: SolverConfig,
    pub voxel_resolution: usize,
    /// Random nodal displacement of the initial guess, relative to the
    /// smallest element altitude. Zero keeps the default initial guess.
    pub init_perturbation: f64,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mesh: RawMesh,
    material: RawMaterial,
    space: RawSpace,
    #[serde(default)]
    solver: RawSolver,
    out: Option<String>,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    path: Option<String>,
    generator: Option<String>,
    density: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMaterial {
    #[serde(default)]
    a: Vec<f64>,
    #[serde(default)]
    gamma: Vec<f64>,
    #[serde(default)]
    b: Vec<f64>,
    #[serde(default)]
    delta: Vec<f64>,
    barrier_s: f64,
    barrier_c1: Option<f64>,
    #[serde(default)]
    kappa: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    space: String,
    com_target: Option<[f64; 3]>,
    boundary_file: Option<String>,
    boundary_scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    grad_tol: Option<f64>,
    grad_tol_rel: Option<f64>,
    max_iter: Option<usize>,
    ls_shrink: Option<f64>,
    ls_armijo: Option<f64>,
    memory: Option<usize>,
    theta: Option<f64>,
    leaf_capacity: Option<usize>,
    #[serde(rename = "G")]
    coupling: Option<f64>,
    softening: Option<f64>,
    deterministic: Option<bool>,
    voxel_resolution: Option<usize>,
    init_perturbation: Option<f64>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Reads and validates a run config.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base)
}

/// Parses config text; relative paths are taken relative to `base`.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };

    let mesh = match (&raw.mesh.path, &raw.mesh.generator) {
        (Some(p), None) => {
            let p = resolve(p);
            if !p.is_file() {
                return Err(Error::config("mesh.path", format!("{} does not exist", p.display())));
            }
            MeshSource::File(p)
        }
        (None, Some(g)) => MeshSource::parse_generator(g)?,
        (Some(_), Some(_)) => return Err(Error::config("mesh", "give either `path` or `generator`, not both")),
        (None, None) => return Err(Error::config("mesh", "missing `path` or `generator`")),
    };
    let density = match (&mesh, raw.mesh.density) {
        (MeshSource::File(_), Some(_)) => {
            return Err(Error::config("mesh.density", "mesh files carry per-element densities"));
        }
        (MeshSource::File(_), None) => 1.0,
        (_, Some(d)) if d > 0.0 && d.is_finite() => d,
        (_, Some(d)) => return Err(Error::config("mesh.density", format!("must be positive, got {d}"))),
        (_, None) => return Err(Error::config("mesh.density", "required for generated meshes")),
    };
    match &mesh {
        MeshSource::Ball { radius, resolution } => {
            if !(*radius > 0.0 && radius.is_finite()) {
                return Err(Error::config("mesh.generator", format!("radius must be positive, got {radius}")));
            }
            if *resolution == 0 {
                return Err(Error::config("mesh.generator", "resolution must be at least 1"));
            }
        }
        MeshSource::Box { extents, subdivisions } => {
            if extents.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                return Err(Error::config("mesh.generator", "box extents must be positive"));
            }
            if subdivisions.contains(&0) {
                return Err(Error::config("mesh.generator", "box subdivisions must be at least 1"));
            }
        }
        MeshSource::File(_) => {}
    }

    let m = raw.material;
    if !(m.barrier_s > 0.0 && m.barrier_s.is_finite()) {
        return Err(Error::config("material.barrier_s", format!("must be positive, got {}", m.barrier_s)));
    }
    if let Some(c1) = m.barrier_c1 {
        if !(c1 > 0.0 && c1.is_finite()) {
            return Err(Error::config("material.barrier_c1", format!("must be positive, got {c1}")));
        }
    }
    if !(m.kappa >= 0.0 && m.kappa.is_finite()) {
        return Err(Error::config("material.kappa", format!("must be non-negative, got {}", m.kappa)));
    }
    let material = MaterialConfig {
        a: m.a,
        gamma: m.gamma,
        b: m.b,
        delta: m.delta,
        barrier_s: m.barrier_s,
        barrier_c1: m.barrier_c1,
        kappa: m.kappa,
    };
    material.build()?;

    let kind: SpaceKind = raw
        .space
        .space
        .parse()
        .map_err(|_| Error::config("space.space", format!("must be \"A1\" or \"A2\", got \"{}\"", raw.space.space)))?;
    match kind {
        SpaceKind::A1 => {
            if raw.space.boundary_file.is_some() || raw.space.boundary_scale.is_some() {
                return Err(Error::config("space", "boundary keys only apply to A2"));
            }
        }
        SpaceKind::A2 => {
            if raw.space.com_target.is_some() {
                return Err(Error::config("space.com_target", "only applies to A1"));
            }
            if raw.space.boundary_file.is_some() && raw.space.boundary_scale.is_some() {
                return Err(Error::config("space", "give either `boundary_file` or `boundary_scale`, not both"));
            }
        }
    }
    let boundary_file = match raw.space.boundary_file {
        Some(p) => {
            let p = resolve(&p);
            if !p.is_file() {
                return Err(Error::config("space.boundary_file", format!("{} does not exist", p.display())));
            }
            Some(p)
        }
        None => None,
    };
    let boundary_scale = raw.space.boundary_scale.unwrap_or(1.0);
    if !(boundary_scale > 0.0 && boundary_scale.is_finite()) {
        return Err(Error::config("space.boundary_scale", format!("must be positive, got {boundary_scale}")));
    }
    let space = SpaceConfig {
        kind,
        com_target: raw.space.com_target.map(Vec3::from),
        boundary_file,
        boundary_scale,
    };

    let s = raw.solver;
    let d = SolverConfig::default();
    let solver = SolverConfig {
        grad_tol: s.grad_tol,
        grad_tol_rel: s.grad_tol_rel.unwrap_or(d.grad_tol_rel),
        max_iter: s.max_iter.unwrap_or(d.max_iter),
        ls_shrink: s.ls_shrink.unwrap_or(d.ls_shrink),
        ls_armijo: s.ls_armijo.unwrap_or(d.ls_armijo),
        memory: s.memory.unwrap_or(d.memory),
        theta: s.theta.unwrap_or(d.theta),
        leaf_capacity: s.leaf_capacity.unwrap_or(d.leaf_capacity),
        coupling: s.coupling.unwrap_or(d.coupling),
        softening: s.softening.unwrap_or(d.softening),
        deterministic: s.deterministic.unwrap_or(d.deterministic),
    };
    solver.validate().map_err(|e| match e {
        Error::InvalidArgument { name, reason } => Error::config(format!("solver.{name}"), reason),
        other => other,
    })?;
    let voxel_resolution = s.voxel_resolution.unwrap_or(DEFAULT_VOXEL_RESOLUTION);
    if voxel_resolution < 8 {
        return Err(Error::config("solver.voxel_resolution", format!("must be at least 8, got {voxel_resolution}")));
    }
    let init_perturbation = s.init_perturbation.unwrap_or(0.0);
    if !(init_perturbation >= 0.0 && init_perturbation.is_finite()) {
        return Err(Error::config(
            "solver.init_perturbation",
            format!("must be non-negative, got {init_perturbation}"),
        ));
    }

    Ok(RunConfig {
        mesh,
        density,
        material,
        space,
        solver,
        voxel_resolution,
        init_perturbation,
        out: raw.out.map(|p| resolve(&p)),
        seed: raw.seed,
    })
}

impl RunConfig {
    pub fn build_body(&self) -> Result<ReferenceBody> {
        match &self.mesh {
            MeshSource::File(p) => load_mesh(p),
            MeshSource::Ball { radius, resolution } => build_ball_mesh(*radius, *resolution, self.density),
            MeshSource::Box { extents, subdivisions } => build_box_mesh(*extents, *subdivisions, self.density),
        }
    }

    pub fn build_material(&self) -> Result<OgdenMaterial> {
        self.material.build()
    }

    pub fn build_spec(&self, body: &ReferenceBody) -> Result<AdmissibleSpec> {
        match self.space.kind {
            SpaceKind::A1 => Ok(match self.space.com_target {
                Some(com_target) => AdmissibleSpec::A1 { com_target },
                None => AdmissibleSpec::a1_reference(body),
            }),
            SpaceKind::A2 => match &self.space.boundary_file {
                Some(p) => AdmissibleSpec::a2(body, load_boundary_values(p)?),
                None => {
                    let center = admissible::mass_moment(body, &body.reference_state()) / body.total_mass();
                    let k = self.space.boundary_scale;
                    AdmissibleSpec::a2_from_map(body, |x| center + (x - center) * k)
                }
            },
        }
    }

    /// Applies the seeded random perturbation to `base` and restores the
    /// constraint. Boundary nodes of `A2` are left alone.
    pub fn perturb_init(&self, body: &ReferenceBody, spec: &AdmissibleSpec, base: &DeformationState) -> Result<DeformationState> {
        if self.init_perturbation == 0.0 {
            return Ok(base.clone());
        }
        let amplitude = self.init_perturbation * shortest_altitude(body);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let free = spec.free_nodes(body);
        let mut positions = base.positions.clone();
        for (p, &f) in positions.iter_mut().zip(&free) {
            let d = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if f {
                *p += d * amplitude;
            }
        }
        let state = spec.enforce(body, &DeformationState::new(positions))?;
        let det = admissible::min_det(body, &state);
        if !(det > 0.0) {
            return Err(Error::config(
                "solver.init_perturbation",
                format!("perturbed initial guess inverts an element (min det F = {det:e})"),
            ));
        }
        Ok(state)
    }

    /// The config with every default written out.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(out) = &self.out {
            let _ = writeln!(s, "out = {}", toml_str(&out.display().to_string()));
        }
        let _ = writeln!(s, "\n[mesh]");
        match &self.mesh {
            MeshSource::File(p) => {
                let _ = writeln!(s, "path = {}", toml_str(&p.display().to_string()));
            }
            other => {
                let _ = writeln!(s, "generator = {}", toml_str(&other.generator_string().unwrap_or_default()));
                let _ = writeln!(s, "density = {:?}", self.density);
            }
        }
        let m = &self.material;
        let _ = writeln!(s, "\n[material]");
        let _ = writeln!(s, "a = {}", toml_array(&m.a));
        let _ = writeln!(s, "gamma = {}", toml_array(&m.gamma));
        let _ = writeln!(s, "b = {}", toml_array(&m.b));
        let _ = writeln!(s, "delta = {}", toml_array(&m.delta));
        let _ = writeln!(s, "barrier_s = {:?}", m.barrier_s);
        if let Some(c1) = m.barrier_c1 {
            let _ = writeln!(s, "barrier_c1 = {c1:?}");
        } else {
            let c1 = self.build_material().map(|x| x.barrier().c1).unwrap_or(f64::NAN);
            let _ = writeln!(s, "# barrier_c1 omitted: stress-free value {c1:?}");
        }
        let _ = writeln!(s, "kappa = {:?}", m.kappa);
        let _ = writeln!(s, "\n[space]");
        let _ = writeln!(s, "space = \"{}\"", self.space.kind);
        if let Some(c) = self.space.com_target {
            let _ = writeln!(s, "com_target = {}", toml_array(c.as_slice()));
        }
        if let Some(p) = &self.space.boundary_file {
            let _ = writeln!(s, "boundary_file = {}", toml_str(&p.display().to_string()));
        } else if self.space.kind == SpaceKind::A2 {
            let _ = writeln!(s, "boundary_scale = {:?}", self.space.boundary_scale);
        }
        let c = &self.solver;
        let _ = writeln!(s, "\n[solver]");
        if let Some(t) = c.grad_tol {
            let _ = writeln!(s, "grad_tol = {t:?}");
        }
        let _ = writeln!(s, "grad_tol_rel = {:?}", c.grad_tol_rel);
        let _ = writeln!(s, "max_iter = {}", c.max_iter);
        let _ = writeln!(s, "ls_shrink = {:?}", c.ls_shrink);
        let _ = writeln!(s, "ls_armijo = {:?}", c.ls_armijo);
        let _ = writeln!(s, "memory = {}", c.memory);
        let _ = writeln!(s, "theta = {:?}", c.theta);
        let _ = writeln!(s, "leaf_capacity = {}", c.leaf_capacity);
        let _ = writeln!(s, "G = {:?}", c.coupling);
        let _ = writeln!(s, "softening = {:?}", c.softening);
        let _ = writeln!(s, "deterministic = {}", c.deterministic);
        let _ = writeln!(s, "voxel_resolution = {}", self.voxel_resolution);
        let _ = writeln!(s, "init_perturbation = {:?}", self.init_perturbation);
        s
    }
}

/// Smallest vertex-to-opposite-face distance over all elements.
fn shortest_altitude(body: &ReferenceBody) -> f64 {
    let x = body.nodes();
    let mut best = f64::INFINITY;
    for (t, vol) in body.elements().iter().zip(body.volumes()) {
        for face in crate::mesh::TET_FACES {
            let [a, b, c] = face.map(|i| x[t[i]]);
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            best = best.min(3.0 * vol.abs() / area);
        }
    }
    best
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn toml_array(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
    format!("[{}]", items.join(", "))
}

/// Line-oriented reader that skips blank lines and `#` comments.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next_content(&mut self, expected: &str) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                return Ok((i + 1, line.split_whitespace().collect()));
            }
        }
        Err(Error::Parse {
            line: self.last + 1,
            message: format!("unexpected end of file, expected {expected}"),
        })
    }

    fn finish(&mut self) -> Result<()> {
        match self.next_content("") {
            Ok((line, _)) => Err(Error::Parse {
                line,
                message: "trailing content".into(),
            }),
            Err(_) => Ok(()),
        }
    }
}

fn parse_field<T: std::str::FromStr>(line: usize, token: &str, what: &str) -> Result<T> {
    token.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} from `{token}`"),
    })
}

fn expect_fields(line: usize, fields: &[&str], n: usize, what: &str) -> Result<()> {
    if fields.len() != n {
        return Err(Error::Parse {
            line,
            message: format!("expected {n} fields for {what}, found {}", fields.len()),
        });
    }
    Ok(())
}

fn parse_count(lines: &mut Lines<'_>, keyword: &str) -> Result<usize> {
    let (line, fields) = lines.next_content(&format!("`{keyword} N`"))?;
    if fields.len() != 2 || fields[0] != keyword {
        return Err(Error::Parse {
            line,
            message: format!("expected `{keyword} N`"),
        });
    }
    parse_field(line, fields[1], "a count")
}

pub fn parse_mesh(text: &str) -> Result<ReferenceBody> {
    let mut lines = Lines::new(text);
    let (line, fields) = lines.next_content(MESH_HEADER)?;
    if fields.join(" ") != MESH_HEADER {
        return Err(Error::Parse {
            line,
            message: format!("expected header `{MESH_HEADER}`"),
        });
    }
    let n = parse_count(&mut lines, "nodes")?;
    let mut nodes = Vec::with_capacity(n);
    for k in 0..n {
        let (line, f) = lines.next_content(&format!("node {k} of {n}"))?;
        expect_fields(line, &f, 3, "a node")?;
        nodes.push(Vec3::new(
            parse_field(line, f[0], "x")?,
            parse_field(line, f[1], "y")?,
            parse_field(line, f[2], "z")?,
        ));
    }
    let m = parse_count(&mut lines, "elements")?;
    let mut elements = Vec::with_capacity(m);
    let mut rho = Vec::with_capacity(m);
    for k in 0..m {
        let (line, f) = lines.next_content(&format!("element {k} of {m}"))?;
        expect_fields(line, &f, 5, "an element")?;
        let mut ids = [0usize; 4];
        for (j, id) in ids.iter_mut().enumerate() {
            *id = parse_field(line, f[j], "a node index")?;
            if *id >= n {
                return Err(Error::Parse {
                    line,
                    message: format!("node index {id} out of range (mesh has {n} nodes)"),
                });
            }
        }
        elements.push(ids);
        rho.push(parse_field(line, f[4], "a density")?);
    }
    lines.finish()?;
    ReferenceBody::new(nodes, elements, rho)
}

pub fn load_mesh(path: &Path) -> Result<ReferenceBody> {
    parse_mesh(&fs::read_to_string(path)?)
}

fn check_finite(points: &[Vec3]) -> Result<()> {
    match points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        Some(node) => Err(Error::NonFinite { node }),
        None => Ok(()),
    }
}

pub fn format_mesh(body: &ReferenceBody) -> Result<String> {
    check_finite(body.nodes())?;
    let mut s = String::new();
    let _ = writeln!(s, "{MESH_HEADER}");
    let _ = writeln!(s, "nodes {}", body.num_nodes());
    for p in body.nodes() {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "elements {}", body.num_elements());
    for (e, r) in body.elements().iter().zip(body.rho_ref()) {
        let _ = writeln!(s, "{} {} {} {} {:.16e}", e[0], e[1], e[2], e[3], r);
    }
    Ok(s)
}

pub fn save_mesh(path: &Path, body: &ReferenceBody) -> Result<()> {
    fs::write(path, format_mesh(body)?)?;
    Ok(())
}

/// Boundary data file: one `node x y z` line per boundary node.
pub fn parse_boundary_values(text: &str) -> Result<BTreeMap<usize, Vec3>> {
    let mut lines = Lines::new(text);
    let mut values = BTreeMap::new();
    while let Ok((line, f)) = lines.next_content("") {
        expect_fields(line, &f, 4, "a boundary value")?;
        let node: usize = parse_field(line, f[0], "a node index")?;
        let p = Vec3::new(
            parse_field(line, f[1], "x")?,
            parse_field(line, f[2], "y")?,
            parse_field(line, f[3], "z")?,
        );
        if values.insert(node, p).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("node {node} given twice"),
            });
        }
    }
    Ok(values)
}

pub fn load_boundary_values(path: &Path) -> Result<BTreeMap<usize, Vec3>> {
    parse_boundary_values(&fs::read_to_string(path)?)
}

pub fn format_state_csv(state: &DeformationState) -> Result<String> {
    check_finite(&state.positions)?;
    let mut s = String::from("node,x,y,z\n");
    for (i, p) in state.positions.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.16e},{:.16e},{:.16e}", p.x, p.y, p.z);
    }
    Ok(s)
}

pub fn save_state_csv(path: &Path, state: &DeformationState) -> Result<()> {
    fs::write(path, format_state_csv(state)?)?;
    Ok(())
}

pub fn parse_state_csv(text: &str) -> Result<DeformationState> {
    let mut positions = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("node")) {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        expect_fields(line_no, &f, 4, "a node position")?;
        let node: usize = parse_field(line_no, f[0], "a node index")?;
        if node != positions.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected node {}, found {node}", positions.len()),
            });
        }
        positions.push(Vec3::new(
            parse_field(line_no, f[1], "x")?,
            parse_field(line_no, f[2], "y")?,
            parse_field(line_no, f[3], "z")?,
        ));
    }
    Ok(DeformationState::new(positions))
}

pub fn load_state_csv(path: &Path) -> Result<DeformationState> {
    parse_state_csv(&fs::read_to_string(path)?)
}

pub fn format_history_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from("iter,e_str,e_pot,total,grad_norm,min_det\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.iter, r.e_str, r.e_pot, r.total, r.grad_norm, r.min_det
        );
    }
    s
}

pub fn format_density_csv(density: &[f64]) -> String {
    let mut s = String::from("element,density\n");
    for (e, r) in density.iter().enumerate() {
        let _ = writeln!(s, "{e},{r:.16e}");
    }
    s
}

pub fn format_stress_csv(stress: &[Mat3]) -> String {
    let mut s = String::from("element,s11,s12,s13,s21,s22,s23,s31,s32,s33\n");
    for (e, m) in stress.iter().enumerate() {
        let _ = write!(s, "{e}");
        for i in 0..3 {
            for j in 0..3 {
                let _ = write!(s, ",{:.16e}", m[(i, j)]);
            }
        }
        s.push('\n');
    }
    s
}

/// Key-value report. `solution` adds the solver summary when present.
pub fn format_report(report: &DiagnosticsReport, solution: Option<&Solution>) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv(
        "el_test_basis",
        "\"nodal hat functions of the solve space (consistency audit)\"".into(),
    );
    if let Some(sol) = solution {
        kv("termination", format!("\"{}\"", sol.termination));
        kv("iterations", sol.iterations.to_string());
        kv("grad_norm", format!("{:.16e}", sol.grad_norm));
        kv("grad_tol", format!("{:.16e}", sol.grad_tol));
        kv("max_mass_error_rel", format!("{:.16e}", sol.max_mass_error_rel));
        kv("max_com_error_rel", format!("{:.16e}", sol.max_com_error_rel));
    }
    kv("e_str", format!("{:.16e}", report.energy.e_str));
    kv("e_pot", format!("{:.16e}", report.energy.e_pot));
    kv("total_energy", format!("{:.16e}", report.energy.total));
    kv("min_det", format!("{:.16e}", report.min_det));
    kv("feasible", report.feasible.to_string());
    kv("G", format!("{:?}", report.coupling));
    kv("softening", format!("{:?}", report.softening));
    kv("theta", format!("{:?}", report.theta));
    kv("deterministic", report.deterministic.to_string());
    if let Some(m) = report.mass_error_rel {
        kv("mass_error_rel", format!("{m:.16e}"));
    }
    if let Some(v) = &report.virial {
        kv("virial_stress_trace", format!("{:.16e}", v.stress_trace));
        kv("virial_residual_rel", format!("{:.16e}", v.residual_rel));
        kv("virial_residual_rel_unhalved", format!("{:.16e}", v.residual_rel_unhalved));
    }
    if let Some(el) = &report.el {
        kv("el_residual", format!("{:.16e}", el.normalized));
        kv("el_residual_raw", format!("{:.16e}", el.raw));
        kv("el_residual_scale", format!("{:.16e}", el.scale));
        kv("el_basis_size", el.basis_size.to_string());
    }
    if let Some(inj) = &report.injectivity {
        kv("injectivity_gap", format!("{:.16e}", inj.gap));
        kv("injectivity_voxel_error_bound", format!("{:.16e}", inj.voxel_error_bound));
        kv("injectivity_certified", inj.certifies_injectivity().to_string());
        kv("voxel_resolution", inj.resolution.to_string());
    }
    if !report.feasible {
        kv("tables", "\"skipped: state is not feasible\"".into());
    }
    s
}

/// Reads a `key = value` report back into a map of raw value strings.
pub fn parse_report(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().trim_matches('"').to_string()))
        .collect()
}

/// Writes `report.txt` and, for feasible states, `density.csv` and
/// `stress.csv` into `dir`.
pub fn save_report(dir: &Path, report: &DiagnosticsReport, solution: Option<&Solution>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.txt"), format_report(report, solution))?;
    if let Some(d) = &report.density {
        fs::write(dir.join("density.csv"), format_density_csv(d))?;
    }
    if let Some(st) = &report.stress {
        fs::write(dir.join("stress.csv"), format_stress_csv(st))?;
    }
    Ok(())
}

/// Writes `solution.csv`, `history.csv` and the report files. Non-finite
/// positions are refused before anything is written.
pub fn save_solution(dir: &Path, solution: &Solution, report: &DiagnosticsReport) -> Result<()> {
    let csv = format_state_csv(&solution.state)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("solution.csv"), csv)?;
    fs::write(dir.join("history.csv"), format_history_csv(&solution.history))?;
    save_report(dir, report, Some(solution))
}

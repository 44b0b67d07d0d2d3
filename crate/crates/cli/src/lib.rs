//! Command-line front end. `dispatch` is the whole program minus the
//! process exit, so it can be driven from tests.
//!
//! Exit codes: 0 success, 1 validation failure (rejected material, mesh or
//! config, failed gradient check), 2 runtime error or bad usage.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use gravelast::admissible::SpaceKind;
use gravelast::diagnostics::full_report;
use gravelast::gravity::{self, GravityParams, Octree};
use gravelast::io::{self, RunConfig};
use gravelast::mesh::build_box_mesh;
use gravelast::{AdmissibleSpec, DeformationState, Error, MaterialField, OgdenMaterial, PowerTerm, Problem, SolverConfig, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const THREADS_ENV: &str = "GRAVELAST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gravelast", version, about = "Equilibria of self-gravitating hyperelastic bodies")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check mesh, material exponents and boundary data without solving.
    Validate {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Samples for the empirical growth-condition check.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Minimize the energy and write the solution with its diagnostics.
    Run {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute diagnostics for a saved solution.
    Diagnose {
        /// Run config the solution was computed with.
        #[arg(long)]
        config: PathBuf,
        /// `solution.csv` from a previous run.
        #[arg(long)]
        solution: PathBuf,
        /// Report path; `density.csv` and `stress.csv` go next to it.
        #[arg(long, default_value = "report.txt")]
        out: PathBuf,
    },
    /// Compare treecode and direct summation on random clouds, CSV to stdout.
    BenchGravity {
        /// Point counts, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
        n: Vec<usize>,
        /// Opening angles, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
        theta: Vec<f64>,
        /// Seed of the random clouds.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points per octree leaf.
        #[arg(long, default_value_t = 8)]
        leaf_capacity: usize,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the energy gradient.
    Gradcheck {
        /// Run config; a built-in 100-element box scenario when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed of the random feasible state.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Central-difference step, relative to the mesh length scale.
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
}

/// Failure that maps to exit code 1.
#[derive(Debug)]
struct Rejected(String);

impl std::fmt::Display for Rejected {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Rejected {}

/// Config and file-format problems count as validation failures.
fn classify(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<Rejected>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Parse { .. } | Error::InvalidBody(_) | Error::MissingBoundaryNode(_) | Error::NotBoundaryNode(_)) => 1,
        _ => 2,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| anyhow!("{THREADS_ENV} must be a non-negative integer, got `{value}`"))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 2;
    }
    let result = match cli.command {
        Command::Validate { config, samples } => validate(&config, samples),
        Command::Run { config, out } => run(&config, out.as_deref()),
        Command::Diagnose { config, solution, out } => diagnose(&config, &solution, &out),
        Command::BenchGravity {
            n,
            theta,
            seed,
            leaf_capacity,
            out,
        } => bench_gravity(&n, &theta, seed, leaf_capacity, out.as_deref()),
        Command::Gradcheck { config, seed, step, tol } => gradcheck(config.as_deref(), seed, step, tol),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            classify(&e)
        }
    }
}

fn load(config: &Path) -> anyhow::Result<RunConfig> {
    io::load_config(config).with_context(|| format!("loading {}", config.display()))
}

fn validate(config: &Path, samples: usize) -> anyhow::Result<()> {
    let cfg = load(config)?;
    let body = cfg.build_body()?;
    let mut failures = Vec::new();

    let mesh = body.validate();
    println!("mesh.elements = {}", body.num_elements());
    println!("mesh.nodes = {}", body.num_nodes());
    println!("mesh.total_mass = {:e}", mesh.total_mass);
    println!("mesh.total_volume = {:e}", mesh.total_volume);
    println!("mesh.rho_range = [{:e}, {:e}]", mesh.rho_min, mesh.rho_max);
    println!("mesh.connected = {}", mesh.connected);
    println!("mesh.closed_manifold = {}", mesh.closed_manifold);
    for v in &mesh.violations {
        failures.push(format!("mesh: {v}"));
    }

    let material = cfg.build_material()?;
    let report = material.validate_exponents(cfg.space.kind);
    let x = report.exponents;
    println!("material.p = {}", x.p);
    println!("material.q = {}", x.q);
    println!("material.s = {}", x.s);
    println!("material.r = {}", x.r);
    println!("material.r_exceeds_three = {}", report.r_exceeds_three);
    println!("material.barrier_c1 = {:e}", material.barrier().c1);
    for f in &report.failures {
        failures.push(format!("exponents ({}): {f}", cfg.space.kind));
    }
    if cfg.space.kind == SpaceKind::A1 {
        // Informational: the A2 conditions for the same exponents.
        let a2 = material.validate_exponents(SpaceKind::A2);
        println!("material.also_admits_A2 = {}", a2.accepted);
    }

    let w4 = material.check_w4(samples, cfg.seed)?;
    println!("growth.samples = {}", w4.samples);
    println!("growth.empirical_K = {:e}", w4.empirical_k);
    println!("growth.empirical_c2 = {:e}", w4.empirical_c2);
    println!("growth.nonpositive_denominators = {}", w4.nonpositive_denominators);

    match cfg.build_spec(&body) {
        Ok(spec) => println!("space = {}", spec.kind()),
        Err(e) => failures.push(format!("space: {e}")),
    }

    if failures.is_empty() {
        println!("status = accepted");
        Ok(())
    } else {
        for f in &failures {
            println!("reject: {f}");
        }
        println!("status = rejected");
        Err(Rejected(format!("{} check(s) failed", failures.len())).into())
    }
}

fn run(config: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load(config)?;
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Rejected("no output directory: pass --out or set `out` in the config".into()))?;
    let body = cfg.build_body()?;
    let material: MaterialField = cfg.build_material()?.into();
    let spec = cfg.build_spec(&body)?;
    let problem = Problem::new(&body, &material, &spec, cfg.solver)?;
    let init = cfg.perturb_init(&body, &spec, &problem.default_init()?)?;
    let solution = problem.minimize(&init)?;
    let report = full_report(&problem, &solution.state, cfg.voxel_resolution)?;
    io::save_solution(&dir, &solution, &report)?;
    fs::write(dir.join("config.resolved.toml"), cfg.to_toml())?;
    println!("termination = {}", solution.termination);
    println!("iterations = {}", solution.iterations);
    println!("total_energy = {:e}", solution.breakdown.total);
    println!("output = {}", dir.display());
    if solution.termination != gravelast::Termination::Converged {
        eprintln!("warning: solver stopped with {}", solution.termination);
    }
    match &report.injectivity {
        Some(inj) if !inj.certifies_injectivity() => Err(Rejected(format!(
            "injectivity gap {:e} exceeds the voxel error bound {:e}",
            inj.gap, inj.voxel_error_bound
        ))
        .into()),
        None => Err(Rejected("final state is not feasible".into()).into()),
        _ => Ok(()),
    }
}

fn diagnose(config: &Path, solution: &Path, out: &Path) -> anyhow::Result<()> {
    let cfg = load(config)?;
    let body = cfg.build_body()?;
    let material: MaterialField = cfg.build_material()?.into();
    let spec = cfg.build_spec(&body)?;
    let problem = Problem::new(&body, &material, &spec, cfg.solver)?;
    let state = io::load_state_csv(solution).with_context(|| format!("reading {}", solution.display()))?;
    let report = full_report(&problem, &state, cfg.voxel_resolution)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    fs::write(out, io::format_report(&report, None))?;
    if let Some(d) = &report.density {
        fs::write(dir.join("density.csv"), io::format_density_csv(d))?;
    }
    if let Some(s) = &report.stress {
        fs::write(dir.join("stress.csv"), io::format_stress_csv(s))?;
    }
    println!("feasible = {}", report.feasible);
    println!("min_det = {:e}", report.min_det);
    println!("report = {}", out.display());
    Ok(())
}

fn rel(err: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

/// One benchmark row per `(n, theta)`.
pub fn bench_rows(ns: &[usize], thetas: &[f64], seed: u64, leaf_capacity: usize) -> anyhow::Result<Vec<[f64; 6]>> {
    let params = GravityParams::default();
    let mut rows = Vec::new();
    for &n in ns {
        if n < 2 {
            bail!("point counts must be at least 2, got {n}");
        }
        let cloud = gravity::random_ball_cloud(n, 1.0, seed);
        let t = Instant::now();
        let direct = gravity::gravity_direct(&cloud, &params)?;
        let time_direct = t.elapsed().as_secs_f64();
        let gmax = direct.gradient.iter().map(|g| g.norm()).fold(0.0, f64::max);
        for &theta in thetas {
            if !(theta > 0.0 && theta < 1.0) {
                bail!("theta must lie in (0, 1), got {theta}");
            }
            let t = Instant::now();
            let tree = Octree::build(&cloud, leaf_capacity)?;
            let approx = gravity::gravity_tree(&cloud, &tree, theta, &params)?;
            let time_tree = t.elapsed().as_secs_f64();
            let grad_err = direct
                .gradient
                .iter()
                .zip(&approx.gradient)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            rows.push([
                n as f64,
                theta,
                rel((approx.energy - direct.energy).abs(), direct.energy.abs()),
                rel(grad_err, gmax),
                time_direct,
                time_tree,
            ]);
        }
    }
    Ok(rows)
}

fn bench_gravity(ns: &[usize], thetas: &[f64], seed: u64, leaf_capacity: usize, out: Option<&Path>) -> anyhow::Result<()> {
    let mut csv = String::from("n,theta,energy_error_rel,grad_error_rel,time_direct_s,time_tree_s\n");
    for r in bench_rows(ns, thetas, seed, leaf_capacity)? {
        csv.push_str(&format!("{},{},{:e},{:e},{:e},{:e}\n", r[0], r[1], r[2], r[3], r[4], r[5]));
    }
    print!("{csv}");
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    Ok(())
}

/// Material of the built-in scenarios: `p = 8`, `q = 2`, `s = 9`, stress free.
pub fn default_material() -> OgdenMaterial {
    OgdenMaterial::stress_free(
        vec![PowerTerm::new(1.0, 2.0), PowerTerm::new(0.01, 8.0)],
        vec![PowerTerm::new(1.0, 2.0)],
        9.0,
        0.0,
    )
    .expect("built-in material is valid")
}

/// Random feasible state near the reference: a random near-identity
/// linear map plus nodal jitter of `jitter * L`.
pub fn random_feasible_state(body: &gravelast::ReferenceBody, jitter: f64, rng: &mut impl Rng) -> DeformationState {
    let l = body.length_scale();
    loop {
        let a = gravelast::Mat3::identity() + gravelast::Mat3::from_fn(|_, _| rng.gen_range(-0.15..0.15));
        let shift = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let positions = body
            .nodes()
            .iter()
            .map(|x| {
                let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                a * x + shift + d * (jitter * l)
            })
            .collect();
        let state = DeformationState::new(positions);
        if gravelast::admissible::min_det(body, &state) > 0.1 {
            return state;
        }
    }
}

fn gradcheck(config: Option<&Path>, seed: u64, step: f64, tol: f64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (body, material, spec, solver) = match config {
        Some(c) => {
            let cfg = load(c)?;
            let body = cfg.build_body()?;
            let material: MaterialField = cfg.build_material()?.into();
            let spec = cfg.build_spec(&body)?;
            (body, material, spec, cfg.solver)
        }
        None => {
            let body = build_box_mesh([2.5, 1.0, 1.0], [5, 2, 2], 1.0)?;
            let spec = AdmissibleSpec::a1_reference(&body);
            (body, default_material().into(), spec, SolverConfig::default())
        }
    };
    let problem = Problem::new(&body, &material, &spec, solver)?;
    let base = random_feasible_state(&body, 0.02, &mut rng);
    let state = spec.enforce(&body, &base)?;
    let check = problem.gradient_check(&state, step * body.length_scale())?;
    println!("coordinates = {}", check.coordinates);
    println!("gradient_max_norm = {:e}", check.gradient_max_norm);
    println!("max_abs_error = {:e}", check.max_abs_error);
    println!("max_rel_error = {:e}", check.max_rel_error);
    if check.max_rel_error <= tol {
        println!("status = pass");
        Ok(())
    } else {
        println!("status = fail");
        Err(Rejected(format!("relative error {:e} exceeds {tol:e}", check.max_rel_error)).into())
    }
}

//! Discrete energy `I = E_str + E_pot` over P1 deformations and its
//! minimization by limited-memory BFGS with backtracking.
//!
//! Infeasible trial states (some `det F <= 0`, or coincident gravity points)
//! carry infinite energy, so the line search simply backs off from them.

use rayon::prelude::*;

use crate::admissible::{self, mass_moment, AdmissibleSpec};
use crate::error::{Error, Result};
use crate::gravity::{self, GravityParams, MassCloud};
use crate::material::MaterialField;
use crate::mesh::{DeformationState, Mat3, ReferenceBody, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Absolute stopping threshold on the projected-gradient max norm. When
    /// `None` it is `grad_tol_rel` times the force scale of the problem.
    pub grad_tol: Option<f64>,
    pub grad_tol_rel: f64,
    pub max_iter: usize,
    pub ls_shrink: f64,
    pub ls_armijo: f64,
    pub memory: usize,
    /// Barnes-Hut opening angle; `0` selects direct summation.
    pub theta: f64,
    pub leaf_capacity: usize,
    pub coupling: f64,
    pub softening: f64,
    pub deterministic: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: None,
            grad_tol_rel: 1e-8,
            max_iter: 10_000,
            ls_shrink: 0.5,
            ls_armijo: 1e-4,
            memory: 10,
            theta: 0.0,
            leaf_capacity: 8,
            coupling: 1.0,
            softening: 0.0,
            deterministic: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |name: &'static str, reason: String| Err(Error::invalid(name, reason));
        if let Some(t) = self.grad_tol {
            if !(t > 0.0 && t.is_finite()) {
                return fail("grad_tol", format!("must be positive, got {t}"));
            }
        }
        if !(self.grad_tol_rel > 0.0 && self.grad_tol_rel.is_finite()) {
            return fail("grad_tol_rel", format!("must be positive, got {}", self.grad_tol_rel));
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return fail("ls_shrink", format!("must lie in (0, 1), got {}", self.ls_shrink));
        }
        if !(self.ls_armijo > 0.0 && self.ls_armijo < 1.0) {
            return fail("ls_armijo", format!("must lie in (0, 1), got {}", self.ls_armijo));
        }
        if self.memory == 0 {
            return fail("memory", "must be at least 1".into());
        }
        if !(self.theta == 0.0 || (self.theta > 0.0 && self.theta < 1.0)) {
            return fail("theta", format!("must be 0 or lie in (0, 1), got {}", self.theta));
        }
        if self.leaf_capacity == 0 {
            return fail("leaf_capacity", "must be at least 1".into());
        }
        if !(self.coupling >= 0.0 && self.coupling.is_finite()) {
            return fail("G", format!("must be non-negative, got {}", self.coupling));
        }
        if !(self.softening >= 0.0 && self.softening.is_finite()) {
            return fail("softening", format!("must be non-negative, got {}", self.softening));
        }
        Ok(())
    }

    pub fn gravity_params(&self) -> GravityParams {
        GravityParams {
            coupling: self.coupling,
            softening: self.softening,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub e_str: f64,
    pub e_pot: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn new(e_str: f64, e_pot: f64) -> Self {
        Self {
            e_str,
            e_pot,
            total: e_str + e_pot,
        }
    }

    pub fn infeasible() -> Self {
        Self {
            e_str: f64::INFINITY,
            e_pot: f64::NAN,
            total: f64::INFINITY,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.total.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIter,
    LineSearchFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Converged => "converged",
            Termination::MaxIter => "max_iter",
            Termination::LineSearchFailure => "line_search_failure",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub e_str: f64,
    pub e_pot: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub min_det: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub state: DeformationState,
    pub breakdown: EnergyBreakdown,
    pub iterations: usize,
    pub termination: Termination,
    pub grad_norm: f64,
    pub grad_tol: f64,
    pub history: Vec<IterationRecord>,
    /// Largest `|sum_e rho_e det(F_e) vol_e - M| / M` over accepted iterates.
    pub max_mass_error_rel: f64,
    /// Largest `|sum_e m_e x_e - a| / (|a| + M L)` over accepted iterates (A1).
    pub max_com_error_rel: f64,
}

impl Solution {
    pub fn energy_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.total).collect()
    }
}

/// Everything needed to evaluate the discrete energy.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub body: &'a ReferenceBody,
    pub material: &'a MaterialField,
    pub spec: &'a AdmissibleSpec,
    pub config: SolverConfig,
    masses: Vec<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(body: &'a ReferenceBody, material: &'a MaterialField, spec: &'a AdmissibleSpec, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        let report = body.validate();
        if !report.passed() {
            return Err(Error::InvalidBody(report.violations.join("; ")));
        }
        if let MaterialField::PerElement(ms) = material {
            if ms.len() != body.num_elements() {
                return Err(Error::invalid(
                    "material",
                    format!("{} materials for {} elements", ms.len(), body.num_elements()),
                ));
            }
        }
        Ok(Self {
            body,
            material,
            spec,
            config,
            masses: body.element_masses(),
        })
    }

    /// Typical nodal force: `G M^2 / L^2 + M S / L` with `S` the material
    /// stress scale and `L` the reference bounding-box diagonal.
    pub fn force_scale(&self) -> f64 {
        let m = self.body.total_mass();
        let l = self.body.length_scale();
        self.config.coupling * m * m / (l * l) + m * self.material.stress_scale() / l
    }

    pub fn grad_tol(&self) -> f64 {
        self.config
            .grad_tol
            .unwrap_or(self.config.grad_tol_rel * self.force_scale())
    }

    pub fn mass_cloud(&self, state: &DeformationState) -> MassCloud {
        MassCloud {
            points: self.body.barycenters(state),
            masses: self.masses.clone(),
        }
    }

    fn element_map<T: Send>(&self, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        let n = self.body.num_elements();
        if self.config.deterministic {
            (0..n).map(f).collect()
        } else {
            (0..n).into_par_iter().map(f).collect()
        }
    }

    fn strain_energy(&self, gradients: &[Mat3]) -> f64 {
        let body = self.body;
        let parts = self.element_map(|e| {
            body.rho_ref()[e] * body.volumes()[e] * self.material.get(e).energy_density(&gradients[e])
        });
        parts.iter().sum()
    }

    pub fn total_energy(&self, state: &DeformationState) -> Result<EnergyBreakdown> {
        self.body.check_state(state)?;
        let gradients = self.body.deformation_gradients(state);
        if gradients.iter().any(|f| !(f.determinant() > 0.0)) {
            return Ok(EnergyBreakdown::infeasible());
        }
        let e_str = self.strain_energy(&gradients);
        if !e_str.is_finite() {
            return Ok(EnergyBreakdown::infeasible());
        }
        let cloud = self.mass_cloud(state);
        let e_pot = if self.config.coupling == 0.0 {
            0.0
        } else if self.config.theta == 0.0 {
            match gravity::potential_energy_direct(&cloud, &self.config.gravity_params()) {
                Ok(e) => e,
                Err(Error::CoincidentPoints(..)) => return Ok(EnergyBreakdown::infeasible()),
                Err(e) => return Err(e),
            }
        } else {
            let tree = gravity::Octree::build(&cloud, self.config.leaf_capacity)?;
            match gravity::potential_energy_tree(&cloud, &tree, self.config.theta, &self.config.gravity_params()) {
                Ok(e) => e,
                Err(Error::CoincidentPoints(..)) => return Ok(EnergyBreakdown::infeasible()),
                Err(e) => return Err(e),
            }
        };
        Ok(EnergyBreakdown::new(e_str, e_pot))
    }

    /// Energy and unprojected nodal gradient. Errors on infeasible states.
    pub fn energy_and_gradient(&self, state: &DeformationState) -> Result<(EnergyBreakdown, Vec<Vec3>)> {
        self.body.check_state(state)?;
        let body = self.body;
        let gradients = body.deformation_gradients(state);
        if let Some((e, f)) = gradients.iter().enumerate().find(|(_, f)| !(f.determinant() > 0.0)) {
            return Err(Error::Infeasible {
                element: e,
                det: f.determinant(),
            });
        }
        let parts = self.element_map(|e| {
            let f = &gradients[e];
            let weight = body.rho_ref()[e] * body.volumes()[e];
            let material = self.material.get(e);
            let energy = weight * material.energy_density(f);
            // dE/dDs = weight * dw/dF * Dm^-T; columns are nodes 1..3.
            let h = material.stress_derivative(f).unwrap_or_else(Mat3::zeros) * body.inverse_shape(e).transpose() * weight;
            (energy, h)
        });
        let mut grad = vec![Vec3::zeros(); body.num_nodes()];
        let mut e_str = 0.0;
        for (tet, (energy, h)) in body.elements().iter().zip(&parts) {
            e_str += energy;
            let mut sum = Vec3::zeros();
            for k in 0..3 {
                let col: Vec3 = h.column(k).into();
                grad[tet[k + 1]] += col;
                sum += col;
            }
            grad[tet[0]] -= sum;
        }

        let cloud = self.mass_cloud(state);
        let eval = gravity::evaluate(&cloud, self.config.theta, self.config.leaf_capacity, &self.config.gravity_params())?;
        for (tet, g) in body.elements().iter().zip(&eval.gradient) {
            let quarter = g * 0.25;
            for &n in tet {
                grad[n] += quarter;
            }
        }
        Ok((EnergyBreakdown::new(e_str, eval.energy), grad))
    }

    /// Nodal gradient after the constraint projection (A1) or boundary
    /// masking (A2).
    pub fn total_gradient(&self, state: &DeformationState) -> Result<Vec<Vec3>> {
        let (_, mut g) = self.energy_and_gradient(state)?;
        self.spec.project_gradient(self.body, &mut g);
        Ok(g)
    }

    /// Initial guess: the reference state translated onto the center-of-mass
    /// target for A1, the harmonic extension of the boundary data for A2.
    pub fn default_init(&self) -> Result<DeformationState> {
        match self.spec {
            AdmissibleSpec::A1 { com_target } => Ok(admissible::project_state_com(self.body, &self.body.reference_state(), com_target)),
            AdmissibleSpec::A2 { .. } => admissible::harmonic_extension(self.body, self.spec),
        }
    }

    fn mass_error(&self, state: &DeformationState) -> f64 {
        let m = self.body.total_mass();
        let mut sum = 0.0;
        for (f, (rho, vol)) in self
            .body
            .deformation_gradients(state)
            .iter()
            .zip(self.body.rho_ref().iter().zip(self.body.volumes()))
        {
            let det = f.determinant();
            sum += (rho / det) * (det * vol);
        }
        (sum - m).abs() / m
    }

    fn com_error(&self, state: &DeformationState) -> f64 {
        match self.spec {
            AdmissibleSpec::A1 { com_target } => {
                let scale = com_target.norm() + self.body.total_mass() * self.body.length_scale();
                (mass_moment(self.body, state) - com_target).norm() / scale
            }
            AdmissibleSpec::A2 { .. } => 0.0,
        }
    }

    /// Worst central-difference discrepancy of the gradient over all free
    /// nodal coordinates, relative to the gradient max norm.
    pub fn gradient_check(&self, state: &DeformationState, step: f64) -> Result<GradientCheck> {
        if !(step > 0.0) {
            return Err(Error::invalid("step", format!("must be positive, got {step}")));
        }
        let (_, grad) = self.energy_and_gradient(state)?;
        let free = self.spec.free_nodes(self.body);
        let mut max_abs: f64 = 0.0;
        let mut gmax: f64 = 0.0;
        let mut probe = state.clone();
        let mut checked = 0;
        for n in (0..self.body.num_nodes()).filter(|&n| free[n]) {
            for k in 0..3 {
                let x0 = state.positions[n][k];
                probe.positions[n][k] = x0 + step;
                let ep = self.total_energy(&probe)?.total;
                probe.positions[n][k] = x0 - step;
                let em = self.total_energy(&probe)?.total;
                probe.positions[n][k] = x0;
                let fd = (ep - em) / (2.0 * step);
                max_abs = max_abs.max((fd - grad[n][k]).abs());
                gmax = gmax.max(grad[n][k].abs());
                checked += 1;
            }
        }
        Ok(GradientCheck {
            max_rel_error: if gmax > 0.0 { max_abs / gmax } else { max_abs },
            max_abs_error: max_abs,
            gradient_max_norm: gmax,
            coordinates: checked,
        })
    }

    pub fn minimize(&self, init: &DeformationState) -> Result<Solution> {
        minimize(self, init)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub gradient_max_norm: f64,
    pub coordinates: usize,
}

fn max_norm(g: &[Vec3], free: &[bool]) -> f64 {
    g.iter()
        .zip(free)
        .filter(|(_, f)| **f)
        .map(|(v, _)| v.amax())
        .fold(0.0, f64::max)
}

fn dot(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

struct History {
    pairs: std::collections::VecDeque<(Vec<Vec3>, Vec<Vec3>, f64)>,
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self {
            pairs: Default::default(),
            capacity,
        }
    }

    fn push(&mut self, s: Vec<Vec3>, y: Vec<Vec3>) {
        let sy = dot(&s, &y);
        let scale = dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        if !(sy > 1e-12 * scale) {
            return;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Two-loop recursion: `-H g`.
    fn direction(&self, g: &[Vec3]) -> Vec<Vec3> {
        let mut q = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= yi * a;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += si * (a - b);
            }
        }
        q.iter().map(|v| -v).collect()
    }
}

const MAX_BACKTRACKS: usize = 80;
/// Consecutive accepted steps without any energy decrease before giving up.
const MAX_STALLS: usize = 5;

/// Limited-memory BFGS over the free nodes with Armijo backtracking. Steps
/// that invert an element have infinite energy and are shrunk away. Once the
/// predicted decrease falls below the rounding level of the energy, a step is
/// accepted as long as it does not increase the energy; a run of such steps
/// that never lowers the energy ends the solve as a line-search failure.
pub fn minimize(problem: &Problem<'_>, init: &DeformationState) -> Result<Solution> {
    let body = problem.body;
    let cfg = &problem.config;
    let mut state = problem.spec.enforce(body, init)?;
    let det0 = admissible::min_det(body, &state);
    if !(det0 > 0.0) {
        let e = body
            .deformation_gradients(&state)
            .iter()
            .position(|f| !(f.determinant() > 0.0))
            .unwrap_or(0);
        return Err(Error::Infeasible { element: e, det: det0 });
    }
    let free = problem.spec.free_nodes(body);
    let grad_tol = problem.grad_tol();
    let step_cap = 0.01 * body.length_scale();

    let (mut energy, mut raw) = problem.energy_and_gradient(&state)?;
    let mut pg = raw.clone();
    problem.spec.project_gradient(body, &mut pg);
    let mut gnorm = max_norm(&pg, &free);

    let mut history = vec![IterationRecord {
        iter: 0,
        e_str: energy.e_str,
        e_pot: energy.e_pot,
        total: energy.total,
        grad_norm: gnorm,
        min_det: det0,
    }];
    let mut max_mass = problem.mass_error(&state);
    let mut max_com = problem.com_error(&state);

    let finish = |state, energy, iterations, termination, gnorm, history, max_mass, max_com| Solution {
        state,
        breakdown: energy,
        iterations,
        termination,
        grad_norm: gnorm,
        grad_tol,
        history,
        max_mass_error_rel: max_mass,
        max_com_error_rel: max_com,
    };

    if !free.iter().any(|&f| f) || gnorm <= grad_tol {
        return Ok(finish(state, energy, 0, Termination::Converged, gnorm, history, max_mass, max_com));
    }

    let mut memory = History::new(cfg.memory);
    let mut stalls = 0;
    for iter in 1..=cfg.max_iter {
        let mut dir = memory.direction(&pg);
        let mut slope = dot(&raw, &dir);
        if !(slope < 0.0) {
            memory.pairs.clear();
            dir = pg.iter().map(|v| -v).collect();
            slope = dot(&raw, &dir);
        }
        let dmax = max_norm(&dir, &free);
        let mut alpha = if memory.pairs.is_empty() { (step_cap / dmax).min(1.0) } else { 1.0 };
        let rounding = 1e-13 * (energy.e_str.abs() + energy.e_pot.abs() + 1e-300);

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = state.clone();
            for (n, (p, d)) in trial.positions.iter_mut().zip(&dir).enumerate() {
                if free[n] {
                    *p += d * alpha;
                }
            }
            let e = problem.total_energy(&trial)?;
            if e.is_feasible() {
                let predicted = cfg.ls_armijo * alpha * slope;
                let armijo = e.total <= energy.total + predicted;
                let flat = -predicted <= rounding && e.total <= energy.total;
                if armijo || flat {
                    accepted = Some((trial, alpha));
                    break;
                }
            }
            alpha *= cfg.ls_shrink;
        }
        let Some((trial, alpha)) = accepted else {
            return Ok(finish(state, energy, iter - 1, Termination::LineSearchFailure, gnorm, history, max_mass, max_com));
        };

        let (e_new, raw_new) = problem.energy_and_gradient(&trial)?;
        let mut pg_new = raw_new.clone();
        problem.spec.project_gradient(body, &mut pg_new);
        let s: Vec<Vec3> = dir.iter().map(|d| d * alpha).collect();
        let y: Vec<Vec3> = pg_new.iter().zip(&pg).map(|(a, b)| a - b).collect();
        memory.push(s, y);

        stalls = if e_new.total < energy.total { 0 } else { stalls + 1 };
        state = trial;
        energy = e_new;
        raw = raw_new;
        pg = pg_new;
        gnorm = max_norm(&pg, &free);
        max_mass = max_mass.max(problem.mass_error(&state));
        max_com = max_com.max(problem.com_error(&state));
        history.push(IterationRecord {
            iter,
            e_str: energy.e_str,
            e_pot: energy.e_pot,
            total: energy.total,
            grad_norm: gnorm,
            min_det: admissible::min_det(body, &state),
        });
        if gnorm <= grad_tol {
            return Ok(finish(state, energy, iter, Termination::Converged, gnorm, history, max_mass, max_com));
        }
        if stalls >= MAX_STALLS {
            return Ok(finish(state, energy, iter, Termination::LineSearchFailure, gnorm, history, max_mass, max_com));
        }
    }
    Ok(finish(state, energy, cfg.max_iter, Termination::MaxIter, gnorm, history, max_mass, max_com))
}

/// Convenience wrapper around [`Problem::total_energy`].
pub fn total_energy(
    body: &ReferenceBody,
    material: &MaterialField,
    state: &DeformationState,
    spec: &AdmissibleSpec,
    config: &SolverConfig,
) -> Result<EnergyBreakdown> {
    Problem::new(body, material, spec, *config)?.total_energy(state)
}

/// Convenience wrapper around [`Problem::total_gradient`].
pub fn total_gradient(
    body: &ReferenceBody,
    material: &MaterialField,
    state: &DeformationState,
    spec: &AdmissibleSpec,
    config: &SolverConfig,
) -> Result<Vec<Vec3>> {
    Problem::new(body, material, spec, *config)?.total_gradient(state)
}

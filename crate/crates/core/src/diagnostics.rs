//! Post-solve checks on a deformation: spatial density, Cauchy stress, the
//! virial identity, the discrete weak Euler-Lagrange residual and discrete
//! mass conservation.
//!
//! The Euler-Lagrange residual is tested against nodal hat functions, which
//! is the same space the minimizer searched. It therefore audits the
//! consistency of the solve rather than making an independent claim.

use crate::admissible::{self, AdmissibleSpec, InjectivityReport};
use crate::error::{Error, Result};
use crate::material::MaterialField;
use crate::minimize::{EnergyBreakdown, Problem};
use crate::mesh::{DeformationState, Mat3, ReferenceBody};

fn feasible_gradients(body: &ReferenceBody, state: &DeformationState) -> Result<Vec<Mat3>> {
    body.check_state(state)?;
    let gradients = body.deformation_gradients(state);
    if let Some((e, f)) = gradients.iter().enumerate().find(|(_, f)| !(f.determinant() > 0.0)) {
        return Err(Error::Infeasible {
            element: e,
            det: f.determinant(),
        });
    }
    Ok(gradients)
}

/// `rho_e = rho_ref_e / det F_e` per element.
pub fn spatial_density(body: &ReferenceBody, state: &DeformationState) -> Result<Vec<f64>> {
    Ok(feasible_gradients(body, state)?
        .iter()
        .zip(body.rho_ref())
        .map(|(f, r)| r / f.determinant())
        .collect())
}

/// `sigma_e = rho_ref_e dw/dF(F_e) F_e^T / det F_e` per element.
pub fn cauchy_stress(body: &ReferenceBody, material: &MaterialField, state: &DeformationState) -> Result<Vec<Mat3>> {
    let gradients = feasible_gradients(body, state)?;
    Ok(gradients
        .iter()
        .enumerate()
        .map(|(e, f)| {
            let p = material
                .get(e)
                .piola_stress(body.rho_ref()[e], f)
                .expect("feasible gradient");
            p * f.transpose() / f.determinant()
        })
        .collect())
}

/// `|sum_e rho_e (det F_e vol_e) - M| / M`.
pub fn mass_error_rel(body: &ReferenceBody, state: &DeformationState) -> Result<f64> {
    let density = spatial_density(body, state)?;
    let gradients = body.deformation_gradients(state);
    let mass: f64 = density
        .iter()
        .zip(gradients.iter().zip(body.volumes()))
        .map(|(rho, (f, v))| rho * (f.determinant() * v))
        .sum();
    let m = body.total_mass();
    Ok((mass - m).abs() / m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirialReport {
    /// `sum_e vol_e rho_ref_e tr(dw/dF(F_e) F_e^T)`, i.e. the integrated trace
    /// of the Cauchy stress over the deformed body.
    pub stress_trace: f64,
    pub e_pot: f64,
    /// `|T - E_pot| / max(|T|, |E_pot|)`, zero when both vanish.
    pub residual_rel: f64,
    /// The same residual measured against `-2 E_pot`, the double integral
    /// without the `-1/2` prefactor.
    pub residual_rel_unhalved: f64,
}

fn relative_gap(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Integrated stress trace versus gravitational energy. At an `A1`
/// minimizer they agree: the derivative of the energy along the dilation
/// `(1 - t) psi` vanishes.
pub fn virial_residual(problem: &Problem<'_>, state: &DeformationState) -> Result<VirialReport> {
    let body = problem.body;
    let gradients = feasible_gradients(body, state)?;
    let mut stress_trace = 0.0;
    for (e, f) in gradients.iter().enumerate() {
        let p = problem.material.get(e).stress_derivative(f).expect("feasible gradient");
        stress_trace += body.volumes()[e] * body.rho_ref()[e] * (p * f.transpose()).trace();
    }
    let e_pot = problem.total_energy(state)?.e_pot;
    Ok(VirialReport {
        stress_trace,
        e_pot,
        residual_rel: relative_gap(stress_trace, e_pot),
        residual_rel_unhalved: relative_gap(stress_trace, -2.0 * e_pot),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElResidual {
    /// Largest weak-form defect over the test basis.
    pub raw: f64,
    /// `sum_e vol_e rho_ref_e (1 + |w(F_e)|) / L + G M^2 / L^2`.
    pub scale: f64,
    pub normalized: f64,
    /// Number of vector-valued test functions (three per tested node).
    pub basis_size: usize,
}

/// Weak Euler-Lagrange defect in the material frame,
/// `int rho_ref dw/dF : grad(eta) dX + d/dt E_pot[psi + t eta]`,
/// tested with nodal hat functions times unit vectors: all nodes for `A1`
/// (traction-free boundary), interior nodes for `A2`.
pub fn el_residual(problem: &Problem<'_>, state: &DeformationState) -> Result<ElResidual> {
    let body = problem.body;
    let gradients = feasible_gradients(body, state)?;
    let tested = match problem.spec {
        AdmissibleSpec::A1 { .. } => vec![true; body.num_nodes()],
        AdmissibleSpec::A2 { .. } => problem.spec.free_nodes(body),
    };
    let basis_size = 3 * tested.iter().filter(|&&t| t).count();
    let l = body.length_scale();
    let m = body.total_mass();
    let strain_scale: f64 = gradients
        .iter()
        .enumerate()
        .map(|(e, f)| body.volumes()[e] * body.rho_ref()[e] * (1.0 + problem.material.get(e).energy_density(f).abs()))
        .sum();
    let scale = strain_scale / l + problem.config.coupling * m * m / (l * l);
    if basis_size == 0 {
        return Ok(ElResidual {
            raw: 0.0,
            scale,
            normalized: 0.0,
            basis_size,
        });
    }
    let (_, grad) = problem.energy_and_gradient(state)?;
    let raw = grad
        .iter()
        .zip(&tested)
        .filter(|(_, t)| **t)
        .map(|(g, _)| g.amax())
        .fold(0.0, f64::max);
    Ok(ElResidual {
        raw,
        scale,
        normalized: raw / scale,
        basis_size,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub energy: EnergyBreakdown,
    pub min_det: f64,
    pub feasible: bool,
    pub mass_error_rel: Option<f64>,
    pub virial: Option<VirialReport>,
    pub el: Option<ElResidual>,
    pub injectivity: Option<InjectivityReport>,
    pub density: Option<Vec<f64>>,
    pub stress: Option<Vec<Mat3>>,
    pub coupling: f64,
    pub softening: f64,
    pub theta: f64,
    pub deterministic: bool,
}

/// Runs every check. For infeasible states only the energy and `min_det`
/// are filled in.
pub fn full_report(problem: &Problem<'_>, state: &DeformationState, voxel_resolution: usize) -> Result<DiagnosticsReport> {
    let body = problem.body;
    body.check_state(state)?;
    let min_det = admissible::min_det(body, state);
    let feasible = min_det > 0.0;
    let energy = problem.total_energy(state)?;
    let cfg = &problem.config;
    let mut report = DiagnosticsReport {
        energy,
        min_det,
        feasible,
        mass_error_rel: None,
        virial: None,
        el: None,
        injectivity: None,
        density: None,
        stress: None,
        coupling: cfg.coupling,
        softening: cfg.softening,
        theta: cfg.theta,
        deterministic: cfg.deterministic,
    };
    if !feasible || !energy.is_feasible() {
        return Ok(report);
    }
    report.mass_error_rel = Some(mass_error_rel(body, state)?);
    report.virial = Some(virial_residual(problem, state)?);
    report.el = Some(el_residual(problem, state)?);
    report.injectivity = Some(admissible::injectivity_gap(body, state, voxel_resolution)?);
    report.density = Some(spatial_density(body, state)?);
    report.stress = Some(cauchy_stress(body, problem.material, state)?);
    Ok(report)
}

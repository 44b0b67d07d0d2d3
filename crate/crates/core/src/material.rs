//! Ogden-class polyconvex stored energies
//!
//! ```text
//! w(F) = sum_i a_i (tr C)^(gamma_i/2) + sum_j b_j (tr Cof C)^(delta_j/2) + Gamma(det F) + h
//! Gamma(z) = c1 z^(-s) + kappa (z - 1)^2
//! ```
//!
//! with `C = F^T F`. `h` is fixed by `w(I) = 0`. `tr Cof C` equals `|Cof F|^2`
//! in the Frobenius norm, which is the matrix norm used throughout.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::admissible::SpaceKind;
use crate::error::{Error, Result};
use crate::mesh::{Mat3, Vec3};

/// `coefficient * x^(exponent/2)` applied to `tr C` or `tr Cof C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTerm {
    pub coefficient: f64,
    pub exponent: f64,
}

impl PowerTerm {
    pub fn new(coefficient: f64, exponent: f64) -> Self {
        Self {
            coefficient,
            exponent,
        }
    }

    #[inline]
    fn value(&self, x: f64) -> f64 {
        self.coefficient * x.powf(0.5 * self.exponent)
    }

    /// Derivative with respect to `x`.
    #[inline]
    fn slope(&self, x: f64) -> f64 {
        0.5 * self.coefficient * self.exponent * x.powf(0.5 * self.exponent - 1.0)
    }
}

/// Convex volumetric part `Gamma(z) = c1 z^-s + kappa (z-1)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Barrier {
    pub c1: f64,
    pub s: f64,
    pub kappa: f64,
}

impl Barrier {
    pub fn new(c1: f64, s: f64) -> Self {
        Self { c1, s, kappa: 0.0 }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    #[inline]
    pub fn value(&self, z: f64) -> f64 {
        self.c1 * z.powf(-self.s) + self.kappa * (z - 1.0) * (z - 1.0)
    }

    #[inline]
    pub fn derivative(&self, z: f64) -> f64 {
        -self.s * self.c1 * z.powf(-self.s - 1.0) + 2.0 * self.kappa * (z - 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OgdenMaterial {
    stretch_terms: Vec<PowerTerm>,
    cofactor_terms: Vec<PowerTerm>,
    barrier: Barrier,
    offset: f64,
}

#[inline]
pub fn determinant(f: &Mat3) -> f64 {
    f.determinant()
}

/// Cofactor matrix from 2x2 minors; equals `det(F) F^-T` whenever `F` is
/// invertible and is defined for every `F`.
#[inline]
pub fn cofactor(f: &Mat3) -> Mat3 {
    let c0: Vec3 = f.column(0).into();
    let c1: Vec3 = f.column(1).into();
    let c2: Vec3 = f.column(2).into();
    Mat3::from_columns(&[c1.cross(&c2), c2.cross(&c0), c0.cross(&c1)])
}

/// `h = -(sum a_i 3^(gamma_i/2) + sum b_j 3^(delta_j/2) + Gamma(1))`.
pub fn normalize_offset(stretch: &[PowerTerm], cofactor: &[PowerTerm], barrier: &Barrier) -> f64 {
    let a: f64 = stretch.iter().map(|t| t.value(3.0)).sum();
    let b: f64 = cofactor.iter().map(|t| t.value(3.0)).sum();
    -(a + b + barrier.value(1.0))
}

fn check_terms(name: &'static str, terms: &[PowerTerm]) -> Result<()> {
    for t in terms {
        if !(t.coefficient > 0.0 && t.coefficient.is_finite()) {
            return Err(Error::invalid(
                name,
                format!("coefficient {} must be positive", t.coefficient),
            ));
        }
        if !(t.exponent >= 1.0 && t.exponent.is_finite()) {
            return Err(Error::invalid(
                name,
                format!("exponent {} must be at least 1", t.exponent),
            ));
        }
    }
    Ok(())
}

impl OgdenMaterial {
    pub fn new(stretch_terms: Vec<PowerTerm>, cofactor_terms: Vec<PowerTerm>, barrier: Barrier) -> Result<Self> {
        check_terms("a/gamma", &stretch_terms)?;
        check_terms("b/delta", &cofactor_terms)?;
        if !(barrier.c1 > 0.0 && barrier.c1.is_finite()) {
            return Err(Error::invalid("barrier_c1", format!("must be positive, got {}", barrier.c1)));
        }
        if !(barrier.s > 0.0 && barrier.s.is_finite()) {
            return Err(Error::invalid("barrier_s", format!("must be positive, got {}", barrier.s)));
        }
        if !(barrier.kappa >= 0.0 && barrier.kappa.is_finite()) {
            return Err(Error::invalid("kappa", format!("must be non-negative, got {}", barrier.kappa)));
        }
        let offset = normalize_offset(&stretch_terms, &cofactor_terms, &barrier);
        Ok(Self {
            stretch_terms,
            cofactor_terms,
            barrier,
            offset,
        })
    }

    /// Material whose reference state is stress free, `dw/dF(I) = 0`. The
    /// barrier coefficient is the one unknown fixed by that condition:
    /// `c1 = (sum a_i gamma_i 3^(gamma_i/2-1) + 2 sum b_j delta_j 3^(delta_j/2-1)) / s`.
    ///
    /// Every term is convex in logarithmic principal stretches, so the
    /// identity is then a global minimizer and `w >= 0` everywhere.
    pub fn stress_free(stretch_terms: Vec<PowerTerm>, cofactor_terms: Vec<PowerTerm>, s: f64, kappa: f64) -> Result<Self> {
        let a: f64 = stretch_terms.iter().map(|t| 2.0 * t.slope(3.0)).sum();
        let b: f64 = cofactor_terms.iter().map(|t| 4.0 * t.slope(3.0)).sum();
        if !(s > 0.0) {
            return Err(Error::invalid("barrier_s", format!("must be positive, got {s}")));
        }
        if !(a + b > 0.0) {
            return Err(Error::invalid(
                "a/b",
                "a stress-free material needs at least one stretch or cofactor term",
            ));
        }
        Self::new(stretch_terms, cofactor_terms, Barrier::new((a + b) / s, s).with_kappa(kappa))
    }

    /// `w == 0` everywhere. Only useful to switch the strain energy off.
    pub fn null() -> Self {
        Self {
            stretch_terms: Vec::new(),
            cofactor_terms: Vec::new(),
            barrier: Barrier {
                c1: 0.0,
                s: 1.0,
                kappa: 0.0,
            },
            offset: 0.0,
        }
    }

    pub fn stretch_terms(&self) -> &[PowerTerm] {
        &self.stretch_terms
    }

    pub fn cofactor_terms(&self) -> &[PowerTerm] {
        &self.cofactor_terms
    }

    pub fn barrier(&self) -> &Barrier {
        &self.barrier
    }

    /// The normalization constant `h`.
    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// Stored energy per unit reference mass; `+inf` when `det F <= 0`.
    pub fn energy_density(&self, f: &Mat3) -> f64 {
        let j = f.determinant();
        if !(j > 0.0) {
            return f64::INFINITY;
        }
        let tr_c = f.norm_squared();
        let tr_cof_c = cofactor(f).norm_squared();
        let a: f64 = self.stretch_terms.iter().map(|t| t.value(tr_c)).sum();
        let b: f64 = self.cofactor_terms.iter().map(|t| t.value(tr_cof_c)).sum();
        a + b + self.barrier.value(j) + self.offset
    }

    /// `dw/dF`, or `None` when `det F <= 0`.
    pub fn stress_derivative(&self, f: &Mat3) -> Option<Mat3> {
        let j = f.determinant();
        if !(j > 0.0) {
            return None;
        }
        let cof = cofactor(f);
        let tr_c = f.norm_squared();
        let tr_cof_c = cof.norm_squared();

        // d(tr C)/dF = 2F
        let ka: f64 = self.stretch_terms.iter().map(|t| 2.0 * t.slope(tr_c)).sum();
        let mut out = f * ka;
        if !self.cofactor_terms.is_empty() {
            // d(tr Cof C)/dF = 2 (tr C F - F F^T F)
            let kb: f64 = self.cofactor_terms.iter().map(|t| 2.0 * t.slope(tr_cof_c)).sum();
            out += (f * tr_c - f * f.transpose() * f) * kb;
        }
        out += cof * self.barrier.derivative(j);
        Some(out)
    }

    /// First Piola-Kirchhoff stress `rho_ref dw/dF`.
    pub fn piola_stress(&self, rho_ref: f64, f: &Mat3) -> Option<Mat3> {
        self.stress_derivative(f).map(|p| p * rho_ref)
    }

    pub fn exponents(&self) -> CoercivityExponents {
        let max = |terms: &[PowerTerm]| terms.iter().map(|t| t.exponent).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
        CoercivityExponents::new(
            max(&self.stretch_terms).unwrap_or(0.0),
            max(&self.cofactor_terms).unwrap_or(0.0),
            self.barrier.s,
        )
    }

    pub fn validate_exponents(&self, space: SpaceKind) -> ExponentReport {
        let mut report = self.exponents().validate(space);
        if self.stretch_terms.is_empty() {
            report.accepted = false;
            report.failures.insert(0, "no stretch terms: p is undefined".into());
        }
        if self.cofactor_terms.is_empty() {
            report.accepted = false;
            report.failures.insert(0, "no cofactor terms: q is undefined".into());
        }
        report
    }

    /// Constant `alpha` of the lower bound
    /// `w >= alpha (det F^-s + |F|^p + |Cof F|^q) + h` for the Frobenius norm:
    /// the coefficients of the leading stretch and cofactor terms and `c1`.
    pub fn coercivity_constant(&self) -> f64 {
        let lead = |terms: &[PowerTerm]| {
            terms
                .iter()
                .max_by(|a, b| a.exponent.total_cmp(&b.exponent))
                .map_or(f64::INFINITY, |t| t.coefficient)
        };
        lead(&self.stretch_terms)
            .min(lead(&self.cofactor_terms))
            .min(self.barrier.c1)
    }

    /// Magnitude of the stress response near the identity; used to build
    /// scale-aware tolerances.
    pub fn stress_scale(&self) -> f64 {
        let a: f64 = self.stretch_terms.iter().map(|t| 2.0 * t.slope(3.0)).sum();
        let b: f64 = self.cofactor_terms.iter().map(|t| 4.0 * t.slope(3.0)).sum();
        a + b + self.barrier.s * self.barrier.c1 + 2.0 * self.barrier.kappa
    }

    /// Empirical constants for the growth condition
    /// `|dw/dF F^T| <= K (w + 1)` and `|Gamma'(z)| <= (c2/z)(1 + Gamma(z))`.
    pub fn check_w4(&self, sample_count: usize, seed: u64) -> Result<W4Report> {
        if sample_count == 0 {
            return Err(Error::invalid("sample_count", "must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_k = self.growth_ratio(&Mat3::identity());
        let mut negative = 0;
        for _ in 0..sample_count {
            let f = random_gradient(&mut rng, 1e-3, 1e3);
            let ratio = self.growth_ratio(&f);
            if ratio.is_nan() {
                negative += 1;
            } else {
                worst_k = worst_k.max(ratio);
            }
        }
        let mut worst_c2: f64 = 0.0;
        let steps = 240;
        for i in 0..=steps {
            let z = 10f64.powf(-6.0 + 12.0 * i as f64 / steps as f64);
            let ratio = self.barrier.derivative(z).abs() * z / (1.0 + self.barrier.value(z));
            worst_c2 = worst_c2.max(ratio);
        }
        Ok(W4Report {
            samples: sample_count,
            empirical_k: worst_k,
            empirical_c2: worst_c2,
            nonpositive_denominators: negative,
        })
    }

    /// `|dw/dF F^T| / (w + 1)`; NaN when `w + 1 <= 0`.
    pub fn growth_ratio(&self, f: &Mat3) -> f64 {
        let Some(p) = self.stress_derivative(f) else {
            return f64::NAN;
        };
        let denom = self.energy_density(f) + 1.0;
        if denom <= 0.0 {
            return f64::NAN;
        }
        (p * f.transpose()).norm() / denom
    }
}

/// Random deformation gradient `R1 diag(l) R2` with `det` log-uniform in
/// `[det_lo, det_hi]` and moderate shear stretches.
pub fn random_gradient<R: Rng>(rng: &mut R, det_lo: f64, det_hi: f64) -> Mat3 {
    let log_det = rng.gen_range(det_lo.ln()..=det_hi.ln());
    let l1: f64 = rng.gen_range(-1.0..1.0);
    let l2: f64 = rng.gen_range(-1.0..1.0);
    let l3 = log_det - l1 - l2;
    let stretch = Mat3::from_diagonal(&Vec3::new(l1.exp(), l2.exp(), l3.exp()));
    random_rotation(rng) * stretch * random_rotation(rng)
}

pub fn random_rotation<R: Rng>(rng: &mut R) -> Mat3 {
    let axis = Vec3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let axis = if axis.norm() > 1e-9 { axis.normalize() } else { Vec3::z() };
    Rotation3::new(axis * angle).into_inner()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct W4Report {
    pub samples: usize,
    pub empirical_k: f64,
    pub empirical_c2: f64,
    /// Samples where `w + 1 <= 0`, for which the ratio is undefined.
    pub nonpositive_denominators: usize,
}

/// Growth exponents `p = max gamma_i`, `q = max delta_j`, barrier exponent `s`
/// and the derived integrability exponent `r = q(1+s)/(q+s)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityExponents {
    pub p: f64,
    pub q: f64,
    pub s: f64,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentReport {
    pub space: SpaceKind,
    pub exponents: CoercivityExponents,
    pub accepted: bool,
    /// Only meaningful for `A2`: whether `r > 3`.
    pub r_exceeds_three: bool,
    pub failures: Vec<String>,
}

impl CoercivityExponents {
    pub fn new(p: f64, q: f64, s: f64) -> Self {
        Self {
            p,
            q,
            s,
            r: q * (1.0 + s) / (q + s),
        }
    }

    pub fn validate(&self, space: SpaceKind) -> ExponentReport {
        let Self { p, q, s, r } = *self;
        let mut failures = Vec::new();
        match space {
            SpaceKind::A1 => {
                if !(p > 6.0) {
                    failures.push(format!("A1 requires p > 6 (p = {p})"));
                } else {
                    let q_min = p / (p - 1.0);
                    if !(q >= q_min) {
                        failures.push(format!("A1 requires q >= p/(p-1) = {q_min} (q = {q})"));
                    }
                    let s_min = 2.0 * p / (p - 6.0);
                    if !(s > s_min) {
                        failures.push(format!("A1 requires s > 2p/(p-6) = {s_min} (s = {s})"));
                    }
                }
            }
            SpaceKind::A2 => {
                if !(p > 3.0) {
                    failures.push(format!("A2 requires p > 3 (p = {p})"));
                }
                if !(q > 3.0) {
                    failures.push(format!("A2 requires q > 3 (q = {q})"));
                } else {
                    let s_min = 2.0 * q / (q - 3.0);
                    if !(s > s_min) {
                        failures.push(format!("A2 requires s > 2q/(q-3) = {s_min} (s = {s})"));
                    }
                }
            }
        }
        ExponentReport {
            space,
            exponents: *self,
            accepted: failures.is_empty(),
            r_exceeds_three: r > 3.0,
            failures,
        }
    }
}

/// Stored energy assignment over the elements of a body.
#[derive(Debug, Clone, PartialEq)]
pub enum MaterialField {
    Uniform(OgdenMaterial),
    PerElement(Vec<OgdenMaterial>),
}

impl MaterialField {
    #[inline]
    pub fn get(&self, element: usize) -> &OgdenMaterial {
        match self {
            MaterialField::Uniform(m) => m,
            MaterialField::PerElement(ms) => &ms[element],
        }
    }

    /// Largest stress scale over the distinct materials.
    pub fn stress_scale(&self) -> f64 {
        match self {
            MaterialField::Uniform(m) => m.stress_scale(),
            MaterialField::PerElement(ms) => ms.iter().map(|m| m.stress_scale()).fold(0.0, f64::max),
        }
    }
}

impl From<OgdenMaterial> for MaterialField {
    fn from(m: OgdenMaterial) -> Self {
        MaterialField::Uniform(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn single_term() -> OgdenMaterial {
        OgdenMaterial::new(vec![PowerTerm::new(1.0, 2.0)], vec![], Barrier::new(1.0, 1.0)).unwrap()
    }

    fn rich() -> OgdenMaterial {
        OgdenMaterial::new(
            vec![PowerTerm::new(1.0, 2.0), PowerTerm::new(0.05, 7.0)],
            vec![PowerTerm::new(0.7, 2.0), PowerTerm::new(0.1, 3.5)],
            Barrier::new(0.8, 9.0).with_kappa(0.3),
        )
        .unwrap()
    }

    /// Central differences of the energy, entry by entry.
    fn fd_gradient(m: &OgdenMaterial, f: &Mat3, h: f64) -> Mat3 {
        let mut g = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let mut fp = *f;
                let mut fm = *f;
                fp[(i, j)] += h;
                fm[(i, j)] -= h;
                g[(i, j)] = (m.energy_density(&fp) - m.energy_density(&fm)) / (2.0 * h);
            }
        }
        g
    }

    #[test]
    fn cofactor_examples() {
        let f = Mat3::from_diagonal(&Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(determinant(&f), 6.0);
        assert_eq!(cofactor(&f), Mat3::from_diagonal(&Vec3::new(6.0, 3.0, 2.0)));
        assert_eq!(cofactor(&Mat3::identity()), Mat3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let f = Mat3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let lhs = cofactor(&f) * f.transpose();
            assert!((lhs - Mat3::identity() * f.determinant()).amax() < 1e-12);
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(single_term().offset(), -4.0);
        let empty = OgdenMaterial::new(vec![], vec![], Barrier::new(1.0, 1.0)).unwrap();
        assert_eq!(empty.offset(), -1.0);
        let m = OgdenMaterial::new(
            vec![PowerTerm::new(2.0, 2.0)],
            vec![PowerTerm::new(1.0, 2.0)],
            Barrier::new(1.0, 2.0),
        )
        .unwrap();
        assert_relative_eq!(m.offset(), -10.0, max_relative = 1e-15);
        assert_relative_eq!(m.energy_density(&Mat3::identity()), 0.0, epsilon = 1e-14);
        assert!(rich().energy_density(&Mat3::identity()).abs() < 1e-13);
    }

    #[test]
    fn energy_density_examples() {
        let m = single_term();
        assert_eq!(m.energy_density(&Mat3::identity()), 0.0);
        assert_relative_eq!(m.energy_density(&(Mat3::identity() * 2.0)), 8.125, max_relative = 1e-15);

        let barrier = OgdenMaterial::new(vec![PowerTerm::new(1.0, 2.0)], vec![], Barrier::new(1.0, 2.0)).unwrap();
        let f = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, 1e-6));
        assert!(barrier.energy_density(&f) >= 1e12 + barrier.offset());
        assert_eq!(m.energy_density(&Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0))), f64::INFINITY);
        assert_eq!(m.energy_density(&Mat3::zeros()), f64::INFINITY);
    }

    #[test]
    fn piola_examples() {
        let m = single_term();
        let f = Mat3::identity() * 2.0;
        let p = m.piola_stress(1.0, &f).unwrap();
        assert!((p - Mat3::identity() * 3.9375).amax() < 1e-15);
        let fd = fd_gradient(&m, &f, 1e-6);
        assert!((fd - p).amax() / p.amax() < 1e-6);

        for mat in [single_term(), rich()] {
            let p = mat.stress_derivative(&Mat3::identity()).unwrap();
            let fd = fd_gradient(&mat, &Mat3::identity(), 1e-6);
            assert!((fd - p).amax() / p.amax().max(1.0) < 1e-6);
        }
        assert_eq!(m.piola_stress(2.0, &f).unwrap(), m.piola_stress(1.0, &f).unwrap() * 2.0);
        assert!(m.piola_stress(1.0, &-Mat3::identity()).is_none());
    }

    #[test]
    fn stress_free_material() {
        let m = OgdenMaterial::stress_free(
            vec![PowerTerm::new(1.0, 2.0), PowerTerm::new(0.01, 8.0)],
            vec![PowerTerm::new(1.0, 2.0)],
            9.0,
            0.5,
        )
        .unwrap();
        assert!(m.stress_derivative(&Mat3::identity()).unwrap().amax() < 1e-14);
        assert!(OgdenMaterial::stress_free(vec![], vec![], 2.0, 0.0).is_err());
    }

    #[test]
    fn exponent_examples() {
        let r = CoercivityExponents::new(9.0, 1.5, 7.0).validate(SpaceKind::A1);
        assert!(r.accepted, "{:?}", r.failures);
        let r = CoercivityExponents::new(4.0, 4.0, 9.0).validate(SpaceKind::A2);
        assert!(r.accepted);
        assert!(r.r_exceeds_three);
        assert_relative_eq!(r.exponents.r, 40.0 / 13.0, max_relative = 1e-15);
        let r = CoercivityExponents::new(4.0, 2.0, 10.0).validate(SpaceKind::A1);
        assert!(!r.accepted);
        assert!(r.failures[0].contains("p > 6"));
    }

    #[test]
    fn exponent_boundaries() {
        // q = p/(p-1) is admissible, s = 2p/(p-6) is not.
        assert!(CoercivityExponents::new(7.0, 7.0 / 6.0, 14.5).validate(SpaceKind::A1).accepted);
        assert!(!CoercivityExponents::new(7.0, 7.0 / 6.0, 14.0).validate(SpaceKind::A1).accepted);
        assert!(!CoercivityExponents::new(4.0, 3.0, 100.0).validate(SpaceKind::A2).accepted);
    }

    #[test]
    fn a1_acceptance_does_not_imply_a2() {
        // s = 7 clears 2p/(p-6) = 6 but not 2q/(q-3) = 8.
        let e = CoercivityExponents::new(9.0, 4.0, 7.0);
        assert!(e.validate(SpaceKind::A1).accepted);
        assert!(!e.validate(SpaceKind::A2).accepted);
    }

    #[test]
    fn material_without_cofactor_terms_is_rejected() {
        let r = single_term().validate_exponents(SpaceKind::A1);
        assert!(!r.accepted);
        assert!(r.failures.iter().any(|f| f.contains("q is undefined")));
    }

    #[test]
    fn w4_pure_barrier_c2_bounded_by_s() {
        let s = 3.0;
        let m = OgdenMaterial::new(vec![], vec![], Barrier::new(2.0, s)).unwrap();
        let report = m.check_w4(200, 7).unwrap();
        assert!(report.empirical_c2 <= s);
        assert!(report.empirical_c2 > 0.99 * s);
        assert!(m.check_w4(0, 1).is_err());
    }

    #[test]
    fn w4_identity_ratio_finite() {
        let m = rich();
        let r = m.growth_ratio(&Mat3::identity());
        assert!(r.is_finite());
        let p = m.stress_derivative(&Mat3::identity()).unwrap();
        assert_relative_eq!(r, p.norm(), max_relative = 1e-12);
        let report = m.check_w4(500, 11).unwrap();
        assert!(report.empirical_k.is_finite());
    }

    #[test]
    fn w4_ray_towards_collapse() {
        // Along F = tI the ratio tends to |Gamma'(z) z I| / Gamma(z) = sqrt(3) s.
        let s = 4.0;
        let m = OgdenMaterial::new(vec![], vec![], Barrier::new(1.0, s)).unwrap();
        for k in 1..8 {
            let t = 10f64.powi(-k);
            let ratio = m.growth_ratio(&(Mat3::identity() * t));
            assert!(ratio <= 3f64.sqrt() * s * (1.0 + 1e-9), "t = {t}: {ratio}");
        }
        let t = 1e-3;
        assert!(m.growth_ratio(&(Mat3::identity() * t)) > 0.999 * 3f64.sqrt() * s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn frame_indifference(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_gradient(&mut rng, 0.1, 10.0);
            let q = random_rotation(&mut rng);
            let m = rich();
            let w = m.energy_density(&f);
            let wq = m.energy_density(&(q * f));
            prop_assert!((w - wq).abs() <= 1e-10 * w.abs().max(1.0));
        }

        #[test]
        fn stress_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_gradient(&mut rng, 0.3, 3.0);
            let m = rich();
            let p = m.stress_derivative(&f).unwrap();
            let h = 1e-6 * f.amax();
            let fd = fd_gradient(&m, &f, h);
            prop_assert!((fd - p).amax() <= 1e-6 * p.amax().max(1.0), "{} vs {}", fd, p);
        }

        #[test]
        fn stress_free_energy_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = OgdenMaterial::stress_free(
                vec![PowerTerm::new(1.0, 2.0), PowerTerm::new(0.02, 7.0)],
                vec![PowerTerm::new(0.5, 1.5)],
                3.0,
                0.2,
            ).unwrap();
            let f = random_gradient(&mut rng, 1e-3, 1e3);
            prop_assert!(m.energy_density(&f) >= -1e-12);
        }

        #[test]
        fn coercivity_lower_bound(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rich();
            let f = random_gradient(&mut rng, 1e-3, 1e3);
            let e = m.exponents();
            let alpha = m.coercivity_constant();
            let bound = alpha * (f.determinant().powf(-e.s) + f.norm().powf(e.p) + cofactor(&f).norm().powf(e.q)) + m.offset();
            let w = m.energy_density(&f);
            prop_assert!(w >= bound - 1e-9 * w.abs().max(1.0));
        }

        #[test]
        fn cauchy_like_product_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_gradient(&mut rng, 0.1, 10.0);
            let s = rich().stress_derivative(&f).unwrap() * f.transpose();
            prop_assert!((s - s.transpose()).amax() <= 1e-10 * s.amax().max(1.0));
        }
    }
}

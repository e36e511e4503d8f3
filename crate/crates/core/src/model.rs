//! Shared domain types: Hamiltonian parameters, cumulant states, master-equation
//! coefficient models and the Lindblad-operator map.
//!
//! All dynamics run on dimensionless cumulants: with `a = sqrt(m*omega/hbar)`,
//! `s = (a <q>, <p> / (m*omega*a))` and
//! `x = (m*omega*var_q/hbar, var_p/(m*omega*hbar), cov_qp/hbar)`.
//! Physical moments only appear at the I/O boundary.

use nalgebra::{Matrix2, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Oscillator parameters of `H = p^2/2m + m omega^2 q^2/2 + (delta/2)(qp + pq)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HamiltonianParamsRaw", into = "HamiltonianParamsRaw")]
pub struct HamiltonianParams {
    mass: f64,
    omega: f64,
    delta: f64,
    hbar: f64,
}

#[derive(Serialize, Deserialize)]
struct HamiltonianParamsRaw {
    #[serde(default = "one")]
    mass: f64,
    #[serde(default = "one")]
    omega: f64,
    #[serde(default)]
    delta: f64,
    #[serde(default = "one")]
    hbar: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<HamiltonianParamsRaw> for HamiltonianParams {
    type Error = Error;
    fn try_from(r: HamiltonianParamsRaw) -> Result<Self> {
        HamiltonianParams::new(r.mass, r.omega, r.delta, r.hbar)
    }
}

impl From<HamiltonianParams> for HamiltonianParamsRaw {
    fn from(h: HamiltonianParams) -> Self {
        Self { mass: h.mass, omega: h.omega, delta: h.delta, hbar: h.hbar }
    }
}

impl Default for HamiltonianParams {
    fn default() -> Self {
        Self { mass: 1.0, omega: 1.0, delta: 0.0, hbar: 1.0 }
    }
}

impl HamiltonianParams {
    pub fn new(mass: f64, omega: f64, delta: f64, hbar: f64) -> Result<Self> {
        for (name, v) in [("mass", mass), ("omega", omega), ("hbar", hbar)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !delta.is_finite() {
            return Err(Error::InvalidParameter(format!("delta must be finite, got {delta}")));
        }
        Ok(Self { mass, omega, delta, hbar })
    }

    /// Unit-mass, unit-frequency oscillator with `hbar = 1` and the given coupling `delta`.
    pub fn natural(delta: f64) -> Self {
        Self { delta, ..Self::default() }
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }
    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    /// `delta^2 - omega^2`, signed; negative in the underdamped (rotating) regime.
    pub fn eta_squared(&self) -> f64 {
        self.delta * self.delta - self.omega * self.omega
    }

    /// Position scale `sqrt(m omega / hbar)` of the dimensionless first cumulant.
    fn q_scale(&self) -> f64 {
        (self.mass * self.omega / self.hbar).sqrt()
    }

    /// Momentum scale `1 / sqrt(m omega hbar)`.
    fn p_scale(&self) -> f64 {
        1.0 / (self.mass * self.omega * self.hbar).sqrt()
    }
}

/// First and second cumulants in physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCumulants {
    pub mean_q: f64,
    pub mean_p: f64,
    pub var_q: f64,
    pub var_p: f64,
    pub cov_qp: f64,
}

impl PhysicalCumulants {
    /// `var_q var_p - cov_qp^2`.
    pub fn determinant(&self) -> f64 {
        self.var_q * self.var_p - self.cov_qp * self.cov_qp
    }
}

/// Dimensionless cumulants `s` (first) and `x` (second) at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantState {
    pub t: f64,
    pub s: [f64; 2],
    pub x: [f64; 3],
}

impl CumulantState {
    /// Builds a state, rejecting non-positive variances and Robertson-Schroedinger violations.
    pub fn new(t: f64, s: [f64; 2], x: [f64; 3]) -> Result<Self> {
        let st = Self { t, s, x };
        st.validate(0.0)?;
        Ok(st)
    }

    /// Checks `x0 > 0`, `x1 > 0` and `x0 x1 - x2^2 >= 1/4 - tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.s.iter().chain(self.x.iter()).any(|v| !v.is_finite()) || !self.t.is_finite() {
            return Err(Error::InvalidParameter("non-finite cumulant".into()));
        }
        if !(self.x[0] > 0.0 && self.x[1] > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "variances must be positive, got x = {:?}",
                self.x
            )));
        }
        let margin = self.robertson_schrodinger_margin();
        if margin < -tol {
            return Err(Error::InvariantBreach { t: self.t, margin });
        }
        Ok(())
    }

    /// `x0 x1 - x2^2 - 1/4`; nonnegative for physical states.
    pub fn robertson_schrodinger_margin(&self) -> f64 {
        self.x[0] * self.x[1] - self.x[2] * self.x[2] - 0.25
    }

    /// `x0 x1 - x2^2`, conserved by closed Hamiltonian dynamics.
    pub fn symplectic_invariant(&self) -> f64 {
        self.x[0] * self.x[1] - self.x[2] * self.x[2]
    }

    pub fn from_physical(h: &HamiltonianParams, t: f64, c: &PhysicalCumulants) -> Self {
        let mw = h.mass * h.omega;
        Self {
            t,
            s: [c.mean_q * h.q_scale(), c.mean_p * h.p_scale()],
            x: [mw * c.var_q / h.hbar, c.var_p / (mw * h.hbar), c.cov_qp / h.hbar],
        }
    }

    pub fn to_physical(&self, h: &HamiltonianParams) -> PhysicalCumulants {
        let mw = h.mass * h.omega;
        PhysicalCumulants {
            mean_q: self.s[0] / h.q_scale(),
            mean_p: self.s[1] / h.p_scale(),
            var_q: self.x[0] * h.hbar / mw,
            var_p: self.x[1] * h.hbar * mw,
            cov_qp: self.x[2] * h.hbar,
        }
    }
}

/// Friction and diffusion coefficients at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MecValues {
    pub lambda: f64,
    pub d_qq: f64,
    pub d_pp: f64,
    pub d_qp: f64,
}

/// Time-dependent master-equation coefficients parameterized by an ordered
/// vector of time-independent parameters.
pub trait MecModel: Send + Sync {
    /// Names of the tip-vector components, in order.
    fn tip_names(&self) -> &[String];

    /// Domain check for a tip vector. The default only checks the length and finiteness.
    fn check_tips(&self, tips: &[f64]) -> Result<()> {
        let n = self.tip_names().len();
        if tips.len() != n {
            return Err(Error::Domain(format!("expected {n} tips, got {}", tips.len())));
        }
        if tips.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite tip".into()));
        }
        Ok(())
    }

    /// Coefficients at time `t >= 0`. Implementations may assume `check_tips` passed.
    fn coefficients(&self, t: f64, tips: &[f64]) -> Result<MecValues>;

    fn tip_index(&self, name: &str) -> Option<usize> {
        self.tip_names().iter().position(|n| n == name)
    }
}

/// Time-independent coefficients; the tip vector is `[lambda, d_qq, d_pp, d_qp]`.
#[derive(Debug, Clone)]
pub struct ConstantMecs {
    names: Vec<String>,
}

impl Default for ConstantMecs {
    fn default() -> Self {
        Self { names: ["lambda", "d_qq", "d_pp", "d_qp"].map(String::from).to_vec() }
    }
}

impl ConstantMecs {
    pub fn tips(v: &MecValues) -> [f64; 4] {
        [v.lambda, v.d_qq, v.d_pp, v.d_qp]
    }
}

impl MecModel for ConstantMecs {
    fn tip_names(&self) -> &[String] {
        &self.names
    }

    fn coefficients(&self, _t: f64, tips: &[f64]) -> Result<MecValues> {
        Ok(MecValues { lambda: tips[0], d_qq: tips[1], d_pp: tips[2], d_qp: tips[3] })
    }
}

type CoefficientFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
type DomainFn = dyn Fn(&[f64]) -> bool + Send + Sync;

/// User-supplied coefficient closures.
pub struct FnMecModel {
    names: Vec<String>,
    lambda: Box<CoefficientFn>,
    d_qq: Box<CoefficientFn>,
    d_pp: Box<CoefficientFn>,
    d_qp: Box<CoefficientFn>,
    domain: Option<Box<DomainFn>>,
}

impl FnMecModel {
    pub fn new<L, Q, P, C>(names: &[&str], lambda: L, d_qq: Q, d_pp: P, d_qp: C) -> Self
    where
        L: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        Q: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        P: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        C: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            lambda: Box::new(lambda),
            d_qq: Box::new(d_qq),
            d_pp: Box::new(d_pp),
            d_qp: Box::new(d_qp),
            domain: None,
        }
    }

    /// Restricts admissible tip vectors.
    pub fn with_domain<D>(mut self, domain: D) -> Self
    where
        D: Fn(&[f64]) -> bool + Send + Sync + 'static,
    {
        self.domain = Some(Box::new(domain));
        self
    }
}

impl MecModel for FnMecModel {
    fn tip_names(&self) -> &[String] {
        &self.names
    }

    fn check_tips(&self, tips: &[f64]) -> Result<()> {
        if tips.len() != self.names.len() || tips.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "expected {} finite tips, got {:?}",
                self.names.len(),
                tips
            )));
        }
        match &self.domain {
            Some(d) if !d(tips) => Err(Error::Domain(format!("{tips:?} rejected by model domain"))),
            _ => Ok(()),
        }
    }

    fn coefficients(&self, t: f64, tips: &[f64]) -> Result<MecValues> {
        Ok(MecValues {
            lambda: (self.lambda)(t, tips),
            d_qq: (self.d_qq)(t, tips),
            d_pp: (self.d_pp)(t, tips),
            d_qp: (self.d_qp)(t, tips),
        })
    }
}

type ComplexFn = dyn Fn(f64) -> Complex64 + Send + Sync;

/// Coefficients of the linear Lindblad operators `V_j(t) = a_j(t) p + b_j(t) q`, `j = 1, 2`.
pub struct LindbladCoefficients {
    pub a: [Box<ComplexFn>; 2],
    pub b: [Box<ComplexFn>; 2],
}

impl LindbladCoefficients {
    /// Time-independent coefficients.
    pub fn constant(a: [Complex64; 2], b: [Complex64; 2]) -> Self {
        Self {
            a: [Box::new(move |_| a[0]), Box::new(move |_| a[1])],
            b: [Box::new(move |_| b[0]), Box::new(move |_| b[1])],
        }
    }
}

/// Friction and diffusion generated by linear Lindblad operators:
/// `D_qq = hbar/2 sum|a|^2`, `D_pp = hbar/2 sum|b|^2`,
/// `D_qp = -hbar/2 Re sum a* b`, `lambda = -Im sum a* b`.
pub fn mecs_from_lindblad(l: &LindbladCoefficients, t: f64, hbar: f64) -> MecValues {
    let mut aa = 0.0;
    let mut bb = 0.0;
    let mut ab = Complex64::new(0.0, 0.0);
    for j in 0..2 {
        let a = (l.a[j])(t);
        let b = (l.b[j])(t);
        aa += a.norm_sqr();
        bb += b.norm_sqr();
        ab += a.conj() * b;
    }
    MecValues {
        lambda: -ab.im,
        d_qq: 0.5 * hbar * aa,
        d_pp: 0.5 * hbar * bb,
        d_qp: -0.5 * hbar * ab.re,
    }
}

/// A [`MecModel`] generated by fixed Lindblad coefficient functions (no tips).
pub struct LindbladModel {
    coefficients: LindbladCoefficients,
    hbar: f64,
}

impl LindbladModel {
    pub fn new(coefficients: LindbladCoefficients, hbar: f64) -> Self {
        Self { coefficients, hbar }
    }
}

impl MecModel for LindbladModel {
    fn tip_names(&self) -> &[String] {
        &[]
    }

    fn coefficients(&self, t: f64, _tips: &[f64]) -> Result<MecValues> {
        Ok(mecs_from_lindblad(&self.coefficients, t, self.hbar))
    }
}

/// Generator of the first-cumulant dynamics: `[[delta, omega], [-omega, -delta]]`.
pub fn build_m(h: &HamiltonianParams) -> Matrix2<f64> {
    Matrix2::new(h.delta, h.omega, -h.omega, -h.delta)
}

/// Generator of the second-cumulant dynamics.
pub fn build_r(h: &HamiltonianParams) -> Matrix3<f64> {
    let (d, w) = (h.delta, h.omega);
    Matrix3::new(
        2.0 * d, 0.0, 2.0 * w,
        0.0, -2.0 * d, -2.0 * w,
        -w, w, 0.0,
    )
}

/// Dimensionless diffusion vector `(2/hbar) (m omega D_qq, D_pp/(m omega), D_qp)`.
pub fn diffusion_vector(h: &HamiltonianParams, mec: &MecValues) -> Vector3<f64> {
    let mw = h.mass * h.omega;
    Vector3::new(mw * mec.d_qq, mec.d_pp / mw, mec.d_qp) * (2.0 / h.hbar)
}

/// [`diffusion_vector`] evaluated from a model at time `t`.
pub fn build_diffusion_vector(
    h: &HamiltonianParams,
    model: &dyn MecModel,
    tips: &[f64],
    t: f64,
) -> Result<Vector3<f64>> {
    if t < 0.0 {
        return Err(Error::InvalidParameter(format!("negative time {t}")));
    }
    model.check_tips(tips)?;
    Ok(diffusion_vector(h, &model.coefficients(t, tips)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn m_and_r_reference_values() {
        let h = HamiltonianParams::natural(0.0);
        assert_eq!(build_m(&h), Matrix2::new(0.0, 1.0, -1.0, 0.0));
        assert_eq!(
            build_r(&h),
            Matrix3::new(0.0, 0.0, 2.0, 0.0, 0.0, -2.0, -1.0, 1.0, 0.0)
        );
        let h = HamiltonianParams::new(1.0, 3.0, 2.0, 1.0).unwrap();
        assert_eq!(build_m(&h), Matrix2::new(2.0, 3.0, -3.0, -2.0));
        let h = HamiltonianParams::new(1.0, 2.0, 1.0, 1.0).unwrap();
        assert_eq!(
            build_r(&h),
            Matrix3::new(2.0, 0.0, 4.0, 0.0, -2.0, -4.0, -2.0, 2.0, 0.0)
        );
    }

    #[test]
    fn invalid_hamiltonian_rejected() {
        assert!(HamiltonianParams::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(HamiltonianParams::new(-1.0, 1.0, 0.0, 1.0).is_err());
        assert!(HamiltonianParams::new(1.0, 1.0, 0.0, 0.0).is_err());
        assert!(HamiltonianParams::new(1.0, 1.0, f64::NAN, 1.0).is_err());
        let err = serde_json::from_str::<HamiltonianParams>(r#"{"omega": -1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn hamiltonian_json_defaults() {
        let h: HamiltonianParams = serde_json::from_str(r#"{"delta": 0.5}"#).unwrap();
        assert_eq!(h, HamiltonianParams::natural(0.5));
    }

    #[test]
    fn diffusion_vector_cases() {
        let h = HamiltonianParams::new(2.0, 3.0, 0.0, 0.5).unwrap();
        let zero = build_diffusion_vector(&h, &ConstantMecs::default(), &[0.0; 4], 1.0).unwrap();
        assert_eq!(zero, Vector3::zeros());
        // D_qq = hbar/(2 m omega) maps to the unit vector e1
        let d_qq = h.hbar() / (2.0 * h.mass() * h.omega());
        let d = build_diffusion_vector(&h, &ConstantMecs::default(), &[0.0, d_qq, 0.0, 0.0], 7.0).unwrap();
        assert!((d - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(build_diffusion_vector(&h, &ConstantMecs::default(), &[0.0; 3], 1.0).is_err());
    }

    #[test]
    fn lindblad_reference_cases() {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let hbar = 0.7;
        let l = LindbladCoefficients::constant([c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 0.0), c(0.0, 0.0)]);
        let v = mecs_from_lindblad(&l, 0.3, hbar);
        assert_eq!(v, MecValues { lambda: 0.0, d_qq: hbar / 2.0, d_pp: 0.0, d_qp: -0.0 });

        // a = 1, b = i: a* b = i, so lambda = -1, D_qp = 0, D_pp = hbar/2
        let l = LindbladCoefficients::constant([c(1.0, 0.0), c(0.0, 0.0)], [c(0.0, 1.0), c(0.0, 0.0)]);
        let v = mecs_from_lindblad(&l, 0.0, hbar);
        assert_eq!(v.lambda, -1.0);
        assert_eq!(v.d_qq, hbar / 2.0);
        assert_eq!(v.d_pp, hbar / 2.0);
        assert_eq!(v.d_qp.abs(), 0.0);

        let l = LindbladCoefficients::constant([c(0.0, 0.0); 2], [c(0.0, 0.0); 2]);
        let v = mecs_from_lindblad(&l, 1.0, hbar);
        assert_eq!((v.lambda, v.d_qq, v.d_pp, v.d_qp.abs()), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn physical_round_trip() {
        let h = HamiltonianParams::new(2.5, 0.4, 0.1, 0.3).unwrap();
        let c = PhysicalCumulants { mean_q: 0.3, mean_p: -1.2, var_q: 0.7, var_p: 0.2, cov_qp: 0.05 };
        let st = CumulantState::from_physical(&h, 1.0, &c);
        let back = st.to_physical(&h);
        for (a, b) in [
            (c.mean_q, back.mean_q),
            (c.mean_p, back.mean_p),
            (c.var_q, back.var_q),
            (c.var_p, back.var_p),
            (c.cov_qp, back.cov_qp),
        ] {
            assert!((a - b).abs() < 1e-14 * a.abs().max(1.0));
        }
        // dimensionless determinant is the physical one over hbar^2
        assert!((st.symplectic_invariant() - c.determinant() / (h.hbar() * h.hbar())).abs() < 1e-12);
    }

    #[test]
    fn cumulant_state_invariants() {
        assert!(CumulantState::new(0.0, [0.0; 2], [0.5, 0.5, 0.0]).is_ok());
        assert!(matches!(
            CumulantState::new(0.0, [0.0; 2], [0.4, 0.5, 0.0]),
            Err(Error::InvariantBreach { .. })
        ));
        assert!(CumulantState::new(0.0, [0.0; 2], [-1.0, -1.0, 0.0]).is_err());
    }

    #[test]
    fn fn_model_domain() {
        let m = FnMecModel::new(&["g"], |_, p| p[0], |_, _| 0.0, |_, _| 0.0, |_, _| 0.0)
            .with_domain(|p| p[0] >= 0.0);
        assert!(m.check_tips(&[1.0]).is_ok());
        assert!(matches!(m.check_tips(&[-1.0]), Err(Error::Domain(_))));
        assert_eq!(m.tip_index("g"), Some(0));
        assert_eq!(m.coefficients(2.0, &[0.25]).unwrap().lambda, 0.25);
    }

    proptest! {
        #[test]
        fn generators_are_traceless(delta in -5.0f64..5.0, omega in 0.01f64..5.0) {
            let h = HamiltonianParams::new(1.0, omega, delta, 1.0).unwrap();
            prop_assert_eq!(build_m(&h).trace(), 0.0);
            prop_assert_eq!(build_r(&h).trace(), 0.0);
            let m = build_m(&h);
            let eye = Matrix2::identity() * h.eta_squared();
            prop_assert!((m * m - eye).norm() <= 1e-12 * (1.0 + h.eta_squared().abs()));
        }

        #[test]
        fn generators_scale_with_omega(ratio in -3.0f64..3.0, omega in 0.1f64..10.0,
                                       mass in 0.1f64..10.0, hbar in 0.1f64..10.0) {
            let h1 = HamiltonianParams::new(1.0, 1.0, ratio, 1.0).unwrap();
            let h2 = HamiltonianParams::new(mass, omega, ratio * omega, hbar).unwrap();
            prop_assert!((build_m(&h2) / omega - build_m(&h1)).norm() < 1e-12);
            prop_assert!((build_r(&h2) / omega - build_r(&h1)).norm() < 1e-12);
        }

        #[test]
        fn lindblad_diffusion_positive(a in proptest::array::uniform4(-3.0f64..3.0),
                                       b in proptest::array::uniform4(-3.0f64..3.0),
                                       hbar in 0.1f64..3.0) {
            let c = |re: f64, im: f64| Complex64::new(re, im);
            let l = LindbladCoefficients::constant([c(a[0], a[1]), c(a[2], a[3])], [c(b[0], b[1]), c(b[2], b[3])]);
            let v = mecs_from_lindblad(&l, 0.0, hbar);
            prop_assert!(v.d_qq >= 0.0 && v.d_pp >= 0.0);
            prop_assert!(v.d_qq * v.d_pp - v.d_qp * v.d_qp >= -1e-12 * (1.0 + v.d_qq * v.d_pp));
        }
    }
}

//! Quantum Brownian motion in an Ohmic bath with Lorentz-Drude cutoff, in the
//! secular weak-coupling, high-temperature form.
//!
//! With `g = wc^2 / (wc^2 + w^2)`:
//!
//! ```text
//! lambda(t) = alpha^2 g w {1 - e^{-wc t} [cos wt + (wc/w) sin wt]}
//! Delta(t)  = 2 alpha^2 g (kT/hbar) {1 - e^{-wc t} [cos wt - (w/wc) sin wt]}
//! ```
//!
//! and `D_qq = hbar Delta / (2 m w)`, `D_pp = hbar m w Delta / 2`, `D_qp = 0`, `delta = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HamiltonianParams, MecModel, MecValues};

/// Below this dimensionless temperature the high-temperature diffusion form is questionable.
pub const HIGH_TEMPERATURE_WARNING: f64 = 2.0;

/// Coupling, cutoff and temperature of the bath, in the ratios used by reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTips {
    pub alpha_sq: f64,
    pub omega_c_over_omega: f64,
    #[serde(rename = "kT_over_hbar_omega")]
    pub kt_over_hbar_omega: f64,
}

impl BenchmarkTips {
    pub fn new(alpha_sq: f64, omega_c_over_omega: f64, kt_over_hbar_omega: f64) -> Result<Self> {
        let t = Self { alpha_sq, omega_c_over_omega, kt_over_hbar_omega };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_sq", self.alpha_sq),
            ("omega_c_over_omega", self.omega_c_over_omega),
            ("kT_over_hbar_omega", self.kt_over_hbar_omega),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn omega_c(&self, h: &HamiltonianParams) -> f64 {
        self.omega_c_over_omega * h.omega()
    }

    /// Tip vector `[alpha_sq, omega_c, kT/(hbar omega)]` consumed by [`BenchmarkModel`].
    pub fn to_vector(&self, h: &HamiltonianParams) -> [f64; 3] {
        [self.alpha_sq, self.omega_c(h), self.kt_over_hbar_omega]
    }

    pub fn from_vector(h: &HamiltonianParams, v: &[f64]) -> Result<Self> {
        if v.len() != 3 {
            return Err(Error::Domain(format!("benchmark expects 3 tips, got {}", v.len())));
        }
        Self::new(v[0], v[1] / h.omega(), v[2])
    }
}

/// `{1 - e^{-wc t} [cos wt + (wc/w) sin wt]}`.
pub fn lambda_bracket(omega_c: f64, omega: f64, t: f64) -> f64 {
    1.0 - (-omega_c * t).exp() * ((omega * t).cos() + omega_c / omega * (omega * t).sin())
}

/// `{1 - e^{-wc t} [cos wt - (w/wc) sin wt]}`.
pub fn delta_bracket(omega_c: f64, omega: f64, t: f64) -> f64 {
    1.0 - (-omega_c * t).exp() * ((omega * t).cos() - omega / omega_c * (omega * t).sin())
}

fn cutoff_factor(omega_c: f64, omega: f64) -> f64 {
    omega_c * omega_c / (omega_c * omega_c + omega * omega)
}

/// Friction coefficient per unit `alpha^2`.
pub fn lambda_per_alpha_sq(omega_c: f64, omega: f64, t: f64) -> f64 {
    cutoff_factor(omega_c, omega) * omega * lambda_bracket(omega_c, omega, t)
}

pub fn benchmark_lambda(tips: &BenchmarkTips, h: &HamiltonianParams, t: f64) -> f64 {
    tips.alpha_sq * lambda_per_alpha_sq(tips.omega_c(h), h.omega(), t)
}

/// Diffusion coefficient `Delta(t)` (dimension of frequency).
pub fn benchmark_delta_coeff(tips: &BenchmarkTips, h: &HamiltonianParams, t: f64) -> f64 {
    let (wc, w) = (tips.omega_c(h), h.omega());
    2.0 * tips.alpha_sq * cutoff_factor(wc, w) * tips.kt_over_hbar_omega * w * delta_bracket(wc, w, t)
}

/// `int_0^t lambda` per unit `alpha^2`, in closed form.
pub fn lambda_integral_per_alpha_sq(omega_c: f64, omega: f64, t: f64) -> f64 {
    let (wc, w) = (omega_c, omega);
    let r = wc / w;
    let s = wc * wc + w * w;
    let prefactor = wc * wc * w * w / (s * s);
    let braces = w * t * s / (w * w) - 2.0 * r
        + (-wc * t).exp() * (2.0 * r * (w * t).cos() + (wc * wc - w * w) / (w * w) * (w * t).sin());
    prefactor * braces
}

pub fn lambda_integral_closed_form(tips: &BenchmarkTips, h: &HamiltonianParams, t: f64) -> f64 {
    tips.alpha_sq * lambda_integral_per_alpha_sq(tips.omega_c(h), h.omega(), t)
}

/// Long-time limits `(lambda_inf, Delta_inf)`.
pub fn stationary_values(tips: &BenchmarkTips, h: &HamiltonianParams) -> (f64, f64) {
    let (wc, w) = (tips.omega_c(h), h.omega());
    let g = cutoff_factor(wc, w);
    (tips.alpha_sq * g * w, 2.0 * tips.alpha_sq * g * tips.kt_over_hbar_omega * w)
}

/// Master-equation coefficients of the benchmark.
pub fn benchmark_mecs(tips: &BenchmarkTips, h: &HamiltonianParams, t: f64) -> MecValues {
    let delta = benchmark_delta_coeff(tips, h, t);
    let mw = h.mass() * h.omega();
    MecValues {
        lambda: benchmark_lambda(tips, h, t),
        d_qq: h.hbar() * delta / (2.0 * mw),
        d_pp: h.hbar() * mw * delta / 2.0,
        d_qp: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LindbladReport {
    pub min_delta_minus_lambda: f64,
    pub min_delta_plus_lambda: f64,
    pub is_lindblad: bool,
    /// Set when `kT/(hbar omega)` is below [`HIGH_TEMPERATURE_WARNING`].
    pub low_temperature_warning: bool,
}

/// Checks `Delta(t) +- lambda(t) >= 0` on a time grid.
pub fn lindblad_diagnostic(tips: &BenchmarkTips, h: &HamiltonianParams, t_grid: &[f64]) -> Result<LindbladReport> {
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    let mut minus = f64::INFINITY;
    let mut plus = f64::INFINITY;
    for &t in t_grid {
        let (l, d) = (benchmark_lambda(tips, h, t), benchmark_delta_coeff(tips, h, t));
        minus = minus.min(d - l);
        plus = plus.min(d + l);
    }
    Ok(LindbladReport {
        min_delta_minus_lambda: minus,
        min_delta_plus_lambda: plus,
        is_lindblad: minus >= 0.0 && plus >= 0.0,
        low_temperature_warning: tips.kt_over_hbar_omega < HIGH_TEMPERATURE_WARNING,
    })
}

/// [`MecModel`] adapter; the tip vector is `[alpha_sq, omega_c, kT/(hbar omega)]`
/// with `omega_c` in the same units as `omega`.
#[derive(Debug, Clone)]
pub struct BenchmarkModel {
    h: HamiltonianParams,
    names: Vec<String>,
}

impl BenchmarkModel {
    pub fn new(h: &HamiltonianParams) -> Result<Self> {
        if h.delta() != 0.0 {
            return Err(Error::InvalidParameter(format!(
                "the benchmark model requires delta = 0, got {}",
                h.delta()
            )));
        }
        Ok(Self {
            h: *h,
            names: ["alpha_sq", "omega_c", "kT_over_hbar_omega"].map(String::from).to_vec(),
        })
    }

    pub fn hamiltonian(&self) -> &HamiltonianParams {
        &self.h
    }
}

impl MecModel for BenchmarkModel {
    fn tip_names(&self) -> &[String] {
        &self.names
    }

    fn check_tips(&self, tips: &[f64]) -> Result<()> {
        BenchmarkTips::from_vector(&self.h, tips).map(|_| ())
    }

    fn coefficients(&self, t: f64, tips: &[f64]) -> Result<MecValues> {
        let tips = BenchmarkTips::from_vector(&self.h, tips)?;
        Ok(benchmark_mecs(&tips, &self.h, t))
    }
}

//! Cumulant dynamics: closed-form propagators, adaptive evolution, and the
//! rotating-frame relations linking measured cumulants to integrals of the
//! friction and diffusion coefficients.

use std::io::Write;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_m, build_r, diffusion_vector, CumulantState, HamiltonianParams, MecModel};
use crate::numerics::ode::{self, OdeOptions, OdeStats};
use crate::numerics::quad::{self, QuadOptions};

/// Below this value of `|eta^2| t^2` the propagator uses its Taylor series.
const SERIES_THRESHOLD: f64 = 1e-8;

/// `e^{tM}` in closed form and `e^{tR}` by scaling and squaring, for constant
/// Hamiltonian parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagators {
    m: Matrix2<f64>,
    r: Matrix3<f64>,
    eta_squared: f64,
}

impl Propagators {
    pub fn new(h: &HamiltonianParams) -> Self {
        Self { m: build_m(h), r: build_r(h), eta_squared: h.eta_squared() }
    }

    pub fn eta_squared(&self) -> f64 {
        self.eta_squared
    }

    pub fn m(&self) -> &Matrix2<f64> {
        &self.m
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    /// `e^{tM} = C(t) I + S(t) M` with `C = cosh(eta t)`, `S = sinh(eta t)/eta`,
    /// continued to `cos`/`sin` of `Omega = sqrt(omega^2 - delta^2)` when `eta^2 < 0`.
    pub fn exp_tm(&self, t: f64) -> Matrix2<f64> {
        let (c, s) = self.cosh_sinhc(t);
        Matrix2::identity() * c + self.m * s
    }

    pub fn exp_tr(&self, t: f64) -> Matrix3<f64> {
        (self.r * t).exp()
    }

    fn cosh_sinhc(&self, t: f64) -> (f64, f64) {
        let z = self.eta_squared * t * t;
        if z.abs() < SERIES_THRESHOLD {
            // six terms of cosh(sqrt z) and sinh(sqrt z)/sqrt z
            let mut c = 0.0;
            let mut s = 0.0;
            let mut zk = 1.0;
            let mut fact_even = 1.0; // (2k)!
            for k in 0..6 {
                let fact_odd = fact_even * (2 * k + 1) as f64; // (2k+1)!
                c += zk / fact_even;
                s += zk / fact_odd;
                zk *= z;
                fact_even = fact_odd * (2 * k + 2) as f64;
            }
            (c, s * t)
        } else if self.eta_squared > 0.0 {
            let eta = self.eta_squared.sqrt();
            ((eta * t).cosh(), (eta * t).sinh() / eta)
        } else {
            let big_omega = (-self.eta_squared).sqrt();
            ((big_omega * t).cos(), (big_omega * t).sin() / big_omega)
        }
    }
}

/// Settings for [`evolve`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions {
    pub ode: OdeOptions,
    /// Allowed undershoot of `x0 x1 - x2^2 - 1/4` before flagging an unphysical evolution.
    pub rs_tolerance: f64,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { ode: OdeOptions::default(), rs_tolerance: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorStats {
    pub steps: OdeStats,
    pub rtol: f64,
    pub atol: f64,
    /// Smallest Robertson-Schroedinger margin seen over all accepted steps.
    pub min_rs_margin: f64,
}

/// Sampled solution of the cumulant equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<CumulantState>,
    pub tips: Vec<f64>,
    pub stats: IntegratorStats,
    /// Every accepted integrator step, used for off-grid interpolation.
    knots: Vec<CumulantState>,
}

impl Trajectory {
    /// Linear interpolation between accepted steps; `None` outside the integrated span.
    pub fn interpolate(&self, t: f64) -> Option<CumulantState> {
        let first = self.knots.first()?;
        let last = self.knots.last()?;
        if t < first.t || t > last.t {
            return None;
        }
        let idx = self.knots.partition_point(|k| k.t < t);
        if idx == 0 {
            return Some(*first);
        }
        let (a, b) = (&self.knots[idx - 1], &self.knots[idx]);
        let w = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        let lerp = |u: f64, v: f64| u + w * (v - u);
        Some(CumulantState {
            t,
            s: [lerp(a.s[0], b.s[0]), lerp(a.s[1], b.s[1])],
            x: [lerp(a.x[0], b.x[0]), lerp(a.x[1], b.x[1]), lerp(a.x[2], b.x[2])],
        })
    }

    /// Writes `t,s1,s2,x1,x2,x3` rows preceded by `#` comment lines.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        h: &HamiltonianParams,
        tip_names: &[String],
        extra_comments: &[String],
    ) -> std::io::Result<()> {
        for c in extra_comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(
            w,
            "# hamiltonian: mass={} omega={} delta={} hbar={}",
            h.mass(),
            h.omega(),
            h.delta(),
            h.hbar()
        )?;
        let tips: Vec<String> = tip_names
            .iter()
            .zip(&self.tips)
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        writeln!(w, "# tips: {}", tips.join(" "))?;
        writeln!(w, "t,s1,s2,x1,x2,x3")?;
        for s in &self.samples {
            writeln!(
                w,
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                s.t, s.s[0], s.s[1], s.x[0], s.x[1], s.x[2]
            )?;
        }
        Ok(())
    }
}

/// Integrates `dS/dt = (M - lambda I) S`, `dX/dt = (R - 2 lambda I) X + D(t)` and samples on `t_grid`.
pub fn evolve(
    initial: &CumulantState,
    h: &HamiltonianParams,
    model: &dyn MecModel,
    tips: &[f64],
    t_grid: &[f64],
    opts: &EvolveOptions,
) -> Result<Trajectory> {
    model.check_tips(tips)?;
    initial.validate(0.0)?;
    if t_grid.is_empty() {
        return Err(Error::InvalidParameter("empty time grid".into()));
    }
    if t_grid[0] < initial.t || t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "time grid must be strictly increasing and start at or after the initial time".into(),
        ));
    }
    let m = build_m(h);
    let r = build_r(h);
    let rhs = |t: f64, y: &[f64; 5]| -> Result<[f64; 5]> {
        let mec = model.coefficients(t, tips)?;
        let d = diffusion_vector(h, &mec);
        let s = Vector2::new(y[0], y[1]);
        let x = Vector3::new(y[2], y[3], y[4]);
        let ds = m * s - s * mec.lambda;
        let dx = r * x - x * (2.0 * mec.lambda) + d;
        Ok([ds[0], ds[1], dx[0], dx[1], dx[2]])
    };

    let mut stats = IntegratorStats {
        steps: OdeStats::default(),
        rtol: opts.ode.rtol,
        atol: opts.ode.atol,
        min_rs_margin: initial.robertson_schrodinger_margin(),
    };
    let mut knots = vec![*initial];
    let mut samples = Vec::with_capacity(t_grid.len());
    let mut breach: Option<(f64, f64)> = None;
    let mut y = [initial.s[0], initial.s[1], initial.x[0], initial.x[1], initial.x[2]];
    let mut t = initial.t;

    for &target in t_grid {
        y = ode::integrate(rhs, t, y, target, &opts.ode, &mut stats.steps, |ts, ys| {
            let st = CumulantState { t: ts, s: [ys[0], ys[1]], x: [ys[2], ys[3], ys[4]] };
            let margin = st.robertson_schrodinger_margin();
            stats.min_rs_margin = stats.min_rs_margin.min(margin);
            if margin < -opts.rs_tolerance && breach.is_none() {
                breach = Some((ts, margin));
            }
            knots.push(st);
        })?;
        if let Some((t, margin)) = breach {
            return Err(Error::InvariantBreach { t, margin });
        }
        t = target;
        samples.push(CumulantState { t, s: [y[0], y[1]], x: [y[2], y[3], y[4]] });
    }
    Ok(Trajectory { samples, tips: tips.to_vec(), stats, knots })
}

/// `S~(t) = e^{-tM} S(t)` for every sample; times are measured from `t = 0`.
pub fn to_rotating_first(traj: &Trajectory, p: &Propagators) -> Vec<[f64; 2]> {
    traj.samples.iter().map(|st| rotating_first(st, p)).collect()
}

pub fn rotating_first(st: &CumulantState, p: &Propagators) -> [f64; 2] {
    let v = p.exp_tm(-st.t) * Vector2::new(st.s[0], st.s[1]);
    [v[0], v[1]]
}

/// `ln(S~_j(0) / S~_j(t))`, the accumulated friction between `0` and `t`.
pub fn lambda_integral_from_measurement(s_tilde_0: f64, s_tilde_t: f64) -> Result<f64> {
    let ratio = s_tilde_0 / s_tilde_t;
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::Domain(format!(
            "rotating-frame ratio {s_tilde_0} / {s_tilde_t} is not positive; choose a component without a zero crossing"
        )));
    }
    Ok(ratio.ln())
}

/// Measured side of the second-cumulant relation: `X(t) - e^{tR} e^{-2 Lambda} X(0)`,
/// where `Lambda` is the friction integral over `[0, t]`.
pub fn second_cumulant_integral_relation(
    x_t: &[f64; 3],
    x_0: &[f64; 3],
    p: &Propagators,
    t: f64,
    lambda_int_0_t: f64,
) -> [f64; 3] {
    let homogeneous = p.exp_tr(t) * Vector3::from(*x_0) * (-2.0 * lambda_int_0_t).exp();
    let v = Vector3::from(*x_t) - homogeneous;
    [v[0], v[1], v[2]]
}

/// Model side of the second-cumulant relation,
/// `int_0^t e^{-2 int_{t'}^t lambda} e^{(t - t') R} D(t') dt'`, by adaptive quadrature.
///
/// `lambda_int(s)` must return `int_0^s lambda`.
pub fn second_cumulant_integral_model<L>(
    h: &HamiltonianParams,
    model: &dyn MecModel,
    tips: &[f64],
    t: f64,
    lambda_int: L,
    opts: &QuadOptions,
) -> Result<[f64; 3]>
where
    L: Fn(f64) -> Result<f64>,
{
    model.check_tips(tips)?;
    let p = Propagators::new(h);
    let lam_t = lambda_int(t)?;
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        let mut failure: Option<Error> = None;
        let integrand = |tp: f64| -> f64 {
            let eval = || -> Result<f64> {
                let d = diffusion_vector(h, &model.coefficients(tp, tips)?);
                let damp = (-2.0 * (lam_t - lambda_int(tp)?)).exp();
                Ok(damp * (p.exp_tr(t - tp) * d)[j])
            };
            match eval() {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let r = quad::integrate(integrand, 0.0, t, opts);
        if let Some(e) = failure {
            return Err(e);
        }
        *o = r?.value;
    }
    Ok(out)
}

/// `int_0^t lambda` by adaptive quadrature of a model's friction coefficient.
pub fn lambda_integral_quadrature(
    model: &dyn MecModel,
    tips: &[f64],
    t: f64,
    opts: &QuadOptions,
) -> Result<f64> {
    let mut failure: Option<Error> = None;
    let r = quad::integrate(
        |s| match model.coefficients(s, tips) {
            Ok(v) => v.lambda,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        0.0,
        t,
        opts,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(r?.value)
}

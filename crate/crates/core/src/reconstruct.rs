//! Recovery of the bath parameters from reconstructed cumulants.
//!
//! Two strategies are provided. The integral one compares the accumulated friction
//! `ln(S~(0)/S~(t))` and the accumulated diffusion with their closed forms; the
//! differential one estimates the instantaneous coefficients from cumulants at `t`
//! and `t + dt`. In both, each measurement time fixes `alpha^2` as an explicit
//! function of the cutoff, and the cutoff is the intersection of two such curves.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::benchmark::{
    delta_bracket, lambda_integral_per_alpha_sq, lambda_per_alpha_sq, BenchmarkModel, BenchmarkTips,
};
use crate::dynamics::{
    evolve, second_cumulant_integral_model, second_cumulant_integral_relation, EvolveOptions, IntegratorStats,
    Propagators,
};
use crate::error::{Error, Result};
use crate::model::{CumulantState, HamiltonianParams, MecValues, PhysicalCumulants};
use crate::numerics::ode::OdeOptions;
use crate::numerics::quad::QuadOptions;
use crate::numerics::roots::{log_grid, roots_on_grid};
use crate::tomography::{
    covariance_abscissae, first_cumulant_abscissae, recover_covariance, recover_mean_and_variance, sample_tomogram,
    CovarianceEstimate, MarginalEstimate, PointBudget, TomogramLine,
};

/// Smallest denominator accepted when dividing by a model factor.
pub const NEAR_ZERO: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Integral,
    Differential,
}

/// How the instantaneous rates are extracted from cumulants at `t` and `t + dt`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateEstimator {
    /// Plain forward difference of the cumulants.
    IncrementalRatio,
    /// Removes the known Hamiltonian part of the step with the exact propagator before differencing.
    #[default]
    PropagatorCorrected,
}

/// Which measured quantity a per-time curve is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    /// `ln(S~(0)/S~(t))`, the friction integral.
    Integral,
    /// `lambda(t)/omega`.
    Differential,
}

/// One scalar measurement at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t: f64,
    pub value: f64,
}

/// `alpha^2` implied by a single measurement if the cutoff were `omega_c`.
pub fn alpha_sq_curve(kind: CurveKind, m: &Measurement, omega_c: f64, h: &HamiltonianParams) -> f64 {
    let w = h.omega();
    match kind {
        CurveKind::Integral => m.value / lambda_integral_per_alpha_sq(omega_c, w, m.t),
        CurveKind::Differential => m.value * w / lambda_per_alpha_sq(omega_c, w, m.t),
    }
}

/// Search range and resolution for the cutoff, in units of `omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub xtol_rel: f64,
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self { lo: 0.05, hi: 100.0, points: 128, xtol_rel: 1e-10 }
    }
}

impl SearchGrid {
    pub fn nodes(&self) -> Vec<f64> {
        log_grid(self.lo, self.hi, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSolution {
    pub alpha_sq: f64,
    pub omega_c_over_omega: f64,
    /// Every sign change of the curve difference, as `omega_c / omega`.
    pub roots_considered: Vec<f64>,
    pub iterations: usize,
    pub bracket: (f64, f64),
    /// `|f1 - f2| / f1` at the selected root.
    pub curve_gap: f64,
    /// Relative mismatch of the held-out measurement, when one decided between roots.
    pub held_out_residual: Option<f64>,
}

/// Intersection of the curves of two measurements at distinct times.
///
/// With several crossings, a held-out third measurement selects the root whose
/// parameters reproduce it best; without one, [`Error::MultipleRoots`] is returned.
pub fn solve_intersection(
    kind: CurveKind,
    meas: [Measurement; 2],
    h: &HamiltonianParams,
    grid: &SearchGrid,
    held_out: Option<Measurement>,
) -> Result<IntersectionSolution> {
    for m in &meas {
        if !(m.t > 0.0) || !m.value.is_finite() {
            return Err(Error::InvalidParameter(format!("measurement {m:?}")));
        }
    }
    if meas[0].t == meas[1].t {
        return Err(Error::InvalidParameter("measurement times must differ".into()));
    }
    let w = h.omega();
    let gap = |r: f64| {
        alpha_sq_curve(kind, &meas[0], r * w, h) - alpha_sq_curve(kind, &meas[1], r * w, h)
    };
    let roots = roots_on_grid(gap, &grid.nodes(), 0.0, grid.xtol_rel)?;
    let considered: Vec<f64> = roots.iter().map(|r| r.x).collect();
    let (chosen, held_out_residual) = match roots.len() {
        0 => return Err(Error::NoBracket { lo: grid.lo, hi: grid.hi }),
        1 => (roots[0], None),
        _ => {
            let Some(m3) = held_out else {
                return Err(Error::MultipleRoots { roots: considered });
            };
            let mismatch = |r: f64| {
                let a = alpha_sq_curve(kind, &meas[0], r * w, h);
                let predicted = match kind {
                    CurveKind::Integral => a * lambda_integral_per_alpha_sq(r * w, w, m3.t),
                    CurveKind::Differential => a * lambda_per_alpha_sq(r * w, w, m3.t) / w,
                };
                ((predicted - m3.value) / m3.value).abs()
            };
            let best = roots
                .iter()
                .copied()
                .min_by(|a, b| mismatch(a.x).total_cmp(&mismatch(b.x)))
                .expect("nonempty");
            (best, Some(mismatch(best.x)))
        }
    };
    let r = chosen.x;
    let a1 = alpha_sq_curve(kind, &meas[0], r * w, h);
    let a2 = alpha_sq_curve(kind, &meas[1], r * w, h);
    Ok(IntersectionSolution {
        alpha_sq: a1,
        omega_c_over_omega: r,
        roots_considered: considered,
        iterations: chosen.iterations,
        bracket: chosen.bracket,
        curve_gap: ((a1 - a2) / a1).abs(),
        held_out_residual,
    })
}

/// Cutoff and coupling from friction integrals `ln(S~_j(0)/S~_j(t))` at two times.
pub fn integral_solve_alpha_omegac(
    meas: [Measurement; 2],
    h: &HamiltonianParams,
    grid: &SearchGrid,
    held_out: Option<Measurement>,
) -> Result<IntersectionSolution> {
    solve_intersection(CurveKind::Integral, meas, h, grid, held_out)
}

/// Cutoff and coupling from friction rates `lambda(t)/omega` at two times.
pub fn differential_solve_alpha_omegac(
    meas: [Measurement; 2],
    h: &HamiltonianParams,
    grid: &SearchGrid,
    held_out: Option<Measurement>,
) -> Result<IntersectionSolution> {
    solve_intersection(CurveKind::Differential, meas, h, grid, held_out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSolution {
    #[serde(rename = "kT_over_hbar_omega")]
    pub kt_over_hbar_omega: f64,
    /// Measured side of the relation.
    pub bracket: f64,
    /// Model side evaluated at unit temperature.
    pub denominator: f64,
}

/// Temperature from the accumulated diffusion in the weighted combination `weights . X(t)`.
///
/// `measured` is `weights . X(t)`; the homogeneous part `e^{-2 Lambda} e^{tR} X(0)` is removed
/// with the reconstructed friction, and the remainder is divided by the diffusion integral at
/// unit temperature.
#[allow(clippy::too_many_arguments)]
pub fn integral_solve_temperature_weighted(
    measured: f64,
    weights: [f64; 3],
    x0: &[f64; 3],
    alpha_sq: f64,
    omega_c_over_omega: f64,
    h: &HamiltonianParams,
    t: f64,
    opts: &QuadOptions,
) -> Result<TemperatureSolution> {
    let model = BenchmarkModel::new(h)?;
    let w = h.omega();
    let wc = omega_c_over_omega * w;
    let tips = [alpha_sq, wc, 1.0];
    let lambda_int = |s: f64| Ok(alpha_sq * lambda_integral_per_alpha_sq(wc, w, s));
    let p = Propagators::new(h);
    let homogeneous = second_cumulant_integral_relation(&[0.0; 3], x0, &p, t, lambda_int(t)?);
    let bracket = measured + dot(&weights, &homogeneous);
    let unit = second_cumulant_integral_model(h, &model, &tips, t, lambda_int, opts)?;
    let denominator = dot(&weights, &unit);
    if denominator.abs() < NEAR_ZERO {
        return Err(Error::DivisionNearZero { what: "accumulated diffusion at unit temperature".into(), value: denominator });
    }
    Ok(TemperatureSolution { kt_over_hbar_omega: bracket / denominator, bracket, denominator })
}

/// Temperature from component `j` (0-based: position, momentum, covariance) of `X(t)`.
#[allow(clippy::too_many_arguments)]
pub fn integral_solve_temperature(
    x_meas: &[f64; 3],
    x0: &[f64; 3],
    j: usize,
    alpha_sq: f64,
    omega_c_over_omega: f64,
    h: &HamiltonianParams,
    t: f64,
    opts: &QuadOptions,
) -> Result<TemperatureSolution> {
    if j > 2 {
        return Err(Error::InvalidParameter(format!("component {j}")));
    }
    let mut weights = [0.0; 3];
    weights[j] = 1.0;
    integral_solve_temperature_weighted(x_meas[j], weights, x0, alpha_sq, omega_c_over_omega, h, t, opts)
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Forward difference `(c_next - c_t) / dt`.
pub fn finite_difference(c_t: f64, c_next: f64, delta_t: f64) -> f64 {
    (c_next - c_t) / delta_t
}

/// Friction rate over `omega` from `<q>_t`, `<q>_{t+dt}` and `<p>_t` (physical units).
pub fn differential_factor(
    estimator: RateEstimator,
    h: &HamiltonianParams,
    mean_q: f64,
    mean_q_next: f64,
    mean_p: f64,
    delta_t: f64,
) -> Result<f64> {
    if !(delta_t > 0.0) {
        return Err(Error::InvalidParameter(format!("delta_t = {delta_t}")));
    }
    let sq = (h.mass() * h.omega() / h.hbar()).sqrt();
    if (mean_q * sq).abs() < NEAR_ZERO {
        return Err(Error::DivisionNearZero { what: "<q>_t".into(), value: mean_q });
    }
    let w = h.omega();
    match estimator {
        RateEstimator::IncrementalRatio => {
            Ok((mean_p / h.mass() - finite_difference(mean_q, mean_q_next, delta_t)) / (w * mean_q))
        }
        RateEstimator::PropagatorCorrected => {
            let sp = 1.0 / (h.mass() * w * h.hbar()).sqrt();
            let s = Vector2::new(mean_q * sq, mean_p * sp);
            let free = (Propagators::new(h).exp_tm(delta_t) * s)[0];
            let ratio = free / (mean_q_next * sq);
            if !(ratio > 0.0) {
                return Err(Error::Domain(format!("<q> changes sign within dt (ratio {ratio})")));
            }
            Ok(ratio.ln() / (delta_t * w))
        }
    }
}

/// Time at which a rate estimate is compared with the model.
pub fn rate_evaluation_time(estimator: RateEstimator, t: f64, delta_t: f64) -> f64 {
    match estimator {
        RateEstimator::IncrementalRatio => t,
        RateEstimator::PropagatorCorrected => t + 0.5 * delta_t,
    }
}

/// Cumulants entering the diffusion estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionMeasurement {
    pub var_q: f64,
    pub var_q_next: f64,
    pub cov: f64,
    /// Needed only by [`RateEstimator::PropagatorCorrected`].
    pub var_p: Option<f64>,
}

/// Measured diffusion bracket `(m[dVar_q/dt + 2 lambda Var_q] - 2 cov) / hbar`, i.e. the
/// position-row diffusion over `omega`.
pub fn measured_diffusion_bracket(
    estimator: RateEstimator,
    meas: &DiffusionMeasurement,
    alpha_sq: f64,
    omega_c_over_omega: f64,
    h: &HamiltonianParams,
    t: f64,
    delta_t: f64,
) -> Result<f64> {
    if !(delta_t > 0.0) {
        return Err(Error::InvalidParameter(format!("delta_t = {delta_t}")));
    }
    let (m, w, hb) = (h.mass(), h.omega(), h.hbar());
    let wc = omega_c_over_omega * w;
    match estimator {
        RateEstimator::IncrementalRatio => {
            let lam = alpha_sq * lambda_per_alpha_sq(wc, w, t);
            let rate = finite_difference(meas.var_q, meas.var_q_next, delta_t);
            Ok((m * (rate + 2.0 * lam * meas.var_q) - 2.0 * meas.cov) / hb)
        }
        RateEstimator::PropagatorCorrected => {
            let var_p = meas.var_p.ok_or_else(|| {
                Error::InvalidParameter("propagator-corrected diffusion needs Var_p at t".into())
            })?;
            let mw = m * w;
            let x = Vector3::new(mw * meas.var_q / hb, var_p / (mw * hb), meas.cov / hb);
            let lam_int = alpha_sq
                * (lambda_integral_per_alpha_sq(wc, w, t + delta_t) - lambda_integral_per_alpha_sq(wc, w, t));
            let free = (Propagators::new(h).exp_tr(delta_t) * x)[0] * (-2.0 * lam_int).exp();
            Ok((mw * meas.var_q_next / hb - free) / (delta_t * w))
        }
    }
}

/// Temperature from a measured diffusion bracket at time `t`.
pub fn temperature_from_bracket(
    bracket: f64,
    alpha_sq: f64,
    omega_c_over_omega: f64,
    h: &HamiltonianParams,
    t: f64,
) -> Result<f64> {
    let w = h.omega();
    let wc = omega_c_over_omega * w;
    let braces = delta_bracket(wc, w, t);
    let scale = 2.0 * alpha_sq * wc * wc / (wc * wc + w * w) * braces;
    if scale.abs() < NEAR_ZERO {
        return Err(Error::DivisionNearZero { what: "diffusion time profile".into(), value: scale });
    }
    Ok(bracket / scale)
}

/// Temperature from position variances at `t`, `t + dt` and the covariance at `t`.
pub fn differential_solve_temperature(
    estimator: RateEstimator,
    meas: &DiffusionMeasurement,
    alpha_sq: f64,
    omega_c_over_omega: f64,
    h: &HamiltonianParams,
    t: f64,
    delta_t: f64,
) -> Result<TemperatureSolution> {
    let bracket = measured_diffusion_bracket(estimator, meas, alpha_sq, omega_c_over_omega, h, t, delta_t)?;
    let te = rate_evaluation_time(estimator, t, delta_t);
    let kt = temperature_from_bracket(bracket, alpha_sq, omega_c_over_omega, h, te)?;
    Ok(TemperatureSolution { kt_over_hbar_omega: kt, bracket, denominator: bracket / kt })
}

/// Instantaneous coefficients of an arbitrary model from cumulants at `t` and `t + dt`.
///
/// The Hamiltonian may depend on time; it is evaluated at the midpoint of the step. The
/// friction is the least-squares decay of `S` relative to the free propagation, the
/// diffusion is what remains of `X` after removing its damped free propagation.
pub fn generic_differential_mecs(
    hamiltonian_at: &dyn Fn(f64) -> HamiltonianParams,
    t: f64,
    delta_t: f64,
    now: &PhysicalCumulants,
    next: &PhysicalCumulants,
) -> Result<MecValues> {
    if !(delta_t > 0.0) {
        return Err(Error::InvalidParameter(format!("delta_t = {delta_t}")));
    }
    let h = hamiltonian_at(t + 0.5 * delta_t);
    let p = Propagators::new(&h);
    let a = CumulantState::from_physical(&h, t, now);
    let b = CumulantState::from_physical(&h, t + delta_t, next);
    let free = p.exp_tm(delta_t) * Vector2::from(a.s);
    let norm = free.norm_squared();
    if norm < NEAR_ZERO {
        return Err(Error::DivisionNearZero { what: "|S|^2".into(), value: norm });
    }
    let decay = Vector2::from(b.s).dot(&free) / norm;
    if !(decay > 0.0) {
        return Err(Error::Domain(format!("first cumulants do not decay consistently (factor {decay})")));
    }
    let lambda = -decay.ln() / delta_t;
    let xfree = p.exp_tr(delta_t) * Vector3::from(a.x) * (-2.0 * lambda * delta_t).exp();
    let d = (Vector3::from(b.x) - xfree) / delta_t;
    let (mw, hb) = (h.mass() * h.omega(), h.hbar());
    Ok(MecValues { lambda, d_qq: hb * d[0] / (2.0 * mw), d_pp: hb * mw * d[1] / 2.0, d_qp: hb * d[2] / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    FirstCumulantQ,
    FirstCumulantP,
    VarianceQ,
    VarianceP,
    Covariance,
    RotatingFirstCumulant,
    RotatingVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub time: f64,
    pub kind: MeasurementKind,
    pub value: f64,
    /// Tomographic points spent to obtain this value; zero when it came with an earlier tomogram.
    pub new_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct MeasuredTomogram {
    time: f64,
    line: TomogramLine,
    estimate: MarginalEstimate,
}

/// Rotating-frame marginal and the row of `e^{-tM}` defining its quadrature.
type RotatingSample = (MarginalEstimate, [f64; 2]);

/// Synthetic laboratory: samples tomograms of a known trajectory and keeps the books.
///
/// Each tomogram (time, line) is sampled at most once; every later request reuses it.
#[derive(Debug, Clone)]
pub struct MeasurementLedger {
    h: HamiltonianParams,
    initial: CumulantState,
    states: Vec<CumulantState>,
    noise_sigma: f64,
    seed: u64,
    tomograms: Vec<MeasuredTomogram>,
    covariances: Vec<(f64, CovarianceEstimate)>,
    records: Vec<MeasurementRecord>,
    budget: PointBudget,
}

impl MeasurementLedger {
    pub fn new(
        h: HamiltonianParams,
        initial: CumulantState,
        states: Vec<CumulantState>,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        Self {
            h,
            initial,
            states,
            noise_sigma,
            seed,
            tomograms: Vec::new(),
            covariances: Vec::new(),
            records: Vec::new(),
            budget: PointBudget::new(),
        }
    }

    fn state(&self, t: f64) -> Result<&CumulantState> {
        self.states
            .iter()
            .find(|s| s.t == t)
            .ok_or_else(|| Error::InvalidParameter(format!("no simulated state at t = {t}")))
    }

    /// Spread guess along `line` from the free evolution of the initial state.
    fn prior_scale(&self, t: f64, line: &TomogramLine) -> f64 {
        let p = Propagators::new(&self.h);
        let x = p.exp_tr(t - self.initial.t) * Vector3::from(self.initial.x);
        let prior = CumulantState { t, s: self.initial.s, x: [x[0], x[1], x[2]] }.to_physical(&self.h);
        line.spread(&prior).max(f64::MIN_POSITIVE).sqrt()
    }

    fn next_seed(&self) -> u64 {
        self.seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(self.budget.tomogram_count() as u64 + 1))
    }

    fn push(&mut self, time: f64, kind: MeasurementKind, value: f64, new_points: usize) {
        if !self.records.iter().any(|r| r.time == time && r.kind == kind) {
            self.records.push(MeasurementRecord { time, kind, value, new_points });
        }
    }

    /// Mean and variance along `line` at `t`; sign of the mean treated as unknown.
    pub fn marginal(&mut self, t: f64, line: TomogramLine) -> Result<MarginalEstimate> {
        if let Some(m) = self.tomograms.iter().find(|m| m.time == t && m.line == line) {
            return Ok(m.estimate);
        }
        let state = *self.state(t)?;
        let xs = first_cumulant_abscissae(self.prior_scale(t, &line), false);
        let points = sample_tomogram(&state, &self.h, &line, &xs, self.noise_sigma, self.next_seed())?;
        let estimate = recover_mean_and_variance(&points, None)?;
        self.budget.add(t, line, estimate.used_points);
        self.tomograms.push(MeasuredTomogram { time: t, line, estimate });
        Ok(estimate)
    }

    pub fn position(&mut self, t: f64) -> Result<MarginalEstimate> {
        let before = self.budget.total();
        let m = self.marginal(t, TomogramLine::POSITION)?;
        let spent = self.budget.total() - before;
        self.push(t, MeasurementKind::FirstCumulantQ, m.mean, spent);
        self.push(t, MeasurementKind::VarianceQ, m.variance, 0);
        Ok(m)
    }

    pub fn momentum(&mut self, t: f64) -> Result<MarginalEstimate> {
        let before = self.budget.total();
        let m = self.marginal(t, TomogramLine::MOMENTUM)?;
        let spent = self.budget.total() - before;
        self.push(t, MeasurementKind::FirstCumulantP, m.mean, spent);
        self.push(t, MeasurementKind::VarianceP, m.variance, 0);
        Ok(m)
    }

    /// Mean and variance along the line that reads component `j` of `e^{-tM} S(t)`.
    pub fn rotating(&mut self, t: f64, j: usize) -> Result<(MarginalEstimate, [f64; 2])> {
        let row = Propagators::new(&self.h).exp_tm(-t);
        let u = [row[(j, 0)], row[(j, 1)]];
        let (m, w, hb) = (self.h.mass(), self.h.omega(), self.h.hbar());
        let line = TomogramLine::new(u[0] * (m * w / hb).sqrt(), u[1] / (m * w * hb).sqrt())?;
        let before = self.budget.total();
        let est = self.marginal(t, line)?;
        let spent = self.budget.total() - before;
        self.push(t, MeasurementKind::RotatingFirstCumulant, est.mean, spent);
        self.push(t, MeasurementKind::RotatingVariance, est.variance, 0);
        Ok((est, u))
    }

    /// Covariance at `t` from two points on the diagonal line, reusing the position and momentum tomograms.
    pub fn covariance(&mut self, t: f64) -> Result<CovarianceEstimate> {
        if let Some((_, c)) = self.covariances.iter().find(|(s, _)| *s == t) {
            return Ok(*c);
        }
        let q = self.position(t)?;
        let p = self.momentum(t)?;
        let line = TomogramLine::DIAGONAL;
        let state = *self.state(t)?;
        let mean = line.mu * q.mean + line.nu * p.mean;
        let xs = covariance_abscissae(mean, self.prior_scale(t, &line));
        let points = sample_tomogram(&state, &self.h, &line, &xs, self.noise_sigma, self.next_seed())?;
        let c = recover_covariance(&points, (q.mean, p.mean), (q.variance, p.variance), self.h.hbar())?;
        self.budget.add(t, line, c.used_points);
        self.covariances.push((t, c));
        self.push(t, MeasurementKind::Covariance, c.cov, c.used_points);
        Ok(c)
    }

    pub fn budget(&self) -> &PointBudget {
        &self.budget
    }

    pub fn records(&self) -> &[MeasurementRecord] {
        &self.records
    }
}

/// Measurement times in units of `1/omega`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub omega_t: [f64; 2],
    /// Time of the temperature step; defaults to the second time (integral) or the first (differential).
    pub omega_t_temperature: Option<f64>,
    /// Extra time measured only to choose between several intersections.
    pub omega_t_held_out: Option<f64>,
    pub omega_delta_t: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { omega_t: [0.5, 10.0], omega_t_temperature: None, omega_t_held_out: Some(3.0), omega_delta_t: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub hamiltonian: HamiltonianParams,
    pub truth: BenchmarkTips,
    pub method: Method,
    pub rotating_frame: bool,
    pub schedule: Schedule,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Initial probe state; assumed known to the experimenter.
    pub initial: CumulantState,
    /// Component of `S~` used for the friction integral (0 = position, 1 = momentum).
    pub component: usize,
    pub estimator: RateEstimator,
    pub grid: SearchGrid,
    pub ode_rtol: f64,
    pub ode_atol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hamiltonian: HamiltonianParams::default(),
            truth: BenchmarkTips { alpha_sq: 0.01, omega_c_over_omega: 10.0, kt_over_hbar_omega: 10.0 },
            method: Method::Integral,
            rotating_frame: false,
            schedule: Schedule::default(),
            noise_sigma: 0.0,
            seed: 0,
            initial: CumulantState { t: 0.0, s: [1.2, 0.3], x: [0.8, 0.5, 0.1] },
            component: 0,
            estimator: RateEstimator::default(),
            grid: SearchGrid::default(),
            ode_rtol: 1e-12,
            ode_atol: 1e-14,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        self.initial.validate(0.0)?;
        if self.initial.t != 0.0 {
            return Err(Error::InvalidParameter("initial state must be at t = 0".into()));
        }
        if self.hamiltonian.delta() != 0.0 {
            return Err(Error::InvalidParameter("the benchmark requires delta = 0".into()));
        }
        let s = &self.schedule;
        let mut times = vec![s.omega_t[0], s.omega_t[1], s.omega_delta_t];
        times.extend(s.omega_t_temperature);
        times.extend(s.omega_t_held_out);
        if times.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter("schedule times must be positive".into()));
        }
        if s.omega_t[0] == s.omega_t[1] {
            return Err(Error::InvalidParameter("the two measurement times must differ".into()));
        }
        if self.component > 1 {
            return Err(Error::InvalidParameter(format!("component {}", self.component)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise_sigma = {}", self.noise_sigma)));
        }
        if !(self.grid.lo > 0.0 && self.grid.hi > self.grid.lo && self.grid.points >= 2) {
            return Err(Error::InvalidParameter("invalid search grid".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TipEstimate {
    pub alpha_sq: Option<f64>,
    pub omega_c_over_omega: Option<f64>,
    #[serde(rename = "kT_over_hbar_omega")]
    pub kt_over_hbar_omega: Option<f64>,
}

impl TipEstimate {
    pub fn complete(&self) -> Option<BenchmarkTips> {
        Some(BenchmarkTips {
            alpha_sq: self.alpha_sq?,
            omega_c_over_omega: self.omega_c_over_omega?,
            kt_over_hbar_omega: self.kt_over_hbar_omega?,
        })
    }

    fn relative_to(&self, truth: &BenchmarkTips) -> Self {
        let rel = |v: Option<f64>, t: f64| v.map(|v| ((v - t) / t).abs());
        Self {
            alpha_sq: rel(self.alpha_sq, truth.alpha_sq),
            omega_c_over_omega: rel(self.omega_c_over_omega, truth.omega_c_over_omega),
            kt_over_hbar_omega: rel(self.kt_over_hbar_omega, truth.kt_over_hbar_omega),
        }
    }

    /// Largest available relative error.
    pub fn max(&self) -> Option<f64> {
        [self.alpha_sq, self.omega_c_over_omega, self.kt_over_hbar_omega].into_iter().flatten().reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub intersection: Option<IntersectionSolution>,
    pub temperature: Option<TemperatureSolution>,
    pub measurement_times: [f64; 2],
    pub temperature_time: f64,
    pub delta_t: Option<f64>,
    pub estimator: Option<RateEstimator>,
    pub integrator: Option<IntegratorStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub kind: String,
    pub message: String,
    pub invariant_breach: bool,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.message)
    }
}

impl std::error::Error for StageFailure {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub method: Method,
    pub rotating_frame: bool,
    pub ground_truth: BenchmarkTips,
    pub tips_found: TipEstimate,
    pub relative_errors: TipEstimate,
    pub residuals: Vec<Residual>,
    pub total_points: usize,
    pub budget: PointBudget,
    pub roots_considered: Vec<f64>,
    pub solver_diagnostics: SolverDiagnostics,
    pub measurements: Vec<MeasurementRecord>,
    pub completed: bool,
    pub failure: Option<StageFailure>,
}

struct Run<'a> {
    cfg: &'a PipelineConfig,
    ledger: MeasurementLedger,
    found: TipEstimate,
    residuals: Vec<Residual>,
    diagnostics: SolverDiagnostics,
}

/// Simulates the benchmark with the configured ground truth, measures it tomographically
/// and reconstructs the three bath parameters.
///
/// Invalid configurations are errors; failures during measurement or solving produce a
/// report with `completed = false` and the failing stage recorded.
pub fn run_full_reconstruction(cfg: &PipelineConfig) -> Result<ReconstructionReport> {
    cfg.validate()?;
    let h = cfg.hamiltonian;
    let w = h.omega();
    let s = &cfg.schedule;
    let dt = s.omega_delta_t / w;
    let [t1, t2] = [s.omega_t[0] / w, s.omega_t[1] / w];
    let rotating = cfg.rotating_frame && cfg.method == Method::Integral;
    let t_temp = s.omega_t_temperature.map(|v| v / w).unwrap_or(match cfg.method {
        Method::Integral => t2,
        Method::Differential => t1,
    });
    let held = s.omega_t_held_out.map(|v| v / w);

    let mut times = vec![t1, t2, t_temp];
    times.extend(held);
    if cfg.method == Method::Differential {
        times.extend([t1 + dt, t2 + dt, t_temp + dt]);
        times.extend(held.map(|t| t + dt));
    }
    times.sort_by(f64::total_cmp);
    times.dedup();

    let mut diagnostics = SolverDiagnostics {
        intersection: None,
        temperature: None,
        measurement_times: [t1, t2],
        temperature_time: t_temp,
        delta_t: (cfg.method == Method::Differential).then_some(dt),
        estimator: (cfg.method == Method::Differential).then_some(cfg.estimator),
        integrator: None,
    };
    let model = BenchmarkModel::new(&h)?;
    let opts = EvolveOptions {
        ode: OdeOptions { rtol: cfg.ode_rtol, atol: cfg.ode_atol, ..OdeOptions::default() },
        ..EvolveOptions::default()
    };
    let traj = match evolve(&cfg.initial, &h, &model, &cfg.truth.to_vector(&h), &times, &opts) {
        Ok(t) => t,
        Err(e) => {
            return Ok(finish(
                cfg,
                TipEstimate::default(),
                Vec::new(),
                diagnostics,
                MeasurementLedger::new(h, cfg.initial, Vec::new(), cfg.noise_sigma, cfg.seed),
                Some(("evolve", e)),
            ))
        }
    };
    diagnostics.integrator = Some(traj.stats);
    let ledger = MeasurementLedger::new(h, cfg.initial, traj.samples, cfg.noise_sigma, cfg.seed);
    let mut run = Run { cfg, ledger, found: TipEstimate::default(), residuals: Vec::new(), diagnostics };
    let outcome = match cfg.method {
        Method::Integral => run.integral(t1, t2, t_temp, held, rotating),
        Method::Differential => run.differential(t1, t2, t_temp, held, dt),
    };
    Ok(finish(cfg, run.found, run.residuals, run.diagnostics, run.ledger, outcome.err()))
}

fn finish(
    cfg: &PipelineConfig,
    found: TipEstimate,
    residuals: Vec<Residual>,
    diagnostics: SolverDiagnostics,
    ledger: MeasurementLedger,
    failure: Option<(&'static str, Error)>,
) -> ReconstructionReport {
    let roots_considered = diagnostics.intersection.as_ref().map(|i| i.roots_considered.clone()).unwrap_or_default();
    ReconstructionReport {
        method: cfg.method,
        rotating_frame: cfg.rotating_frame && cfg.method == Method::Integral,
        ground_truth: cfg.truth,
        relative_errors: found.relative_to(&cfg.truth),
        tips_found: found,
        residuals,
        total_points: ledger.budget().total(),
        budget: ledger.budget().clone(),
        roots_considered,
        solver_diagnostics: diagnostics,
        measurements: ledger.records().to_vec(),
        completed: failure.is_none(),
        failure: failure.map(|(stage, e)| StageFailure {
            stage: stage.into(),
            kind: e.kind().into(),
            message: e.to_string(),
            invariant_breach: e.is_invariant_breach(),
        }),
    }
}

type Staged<T> = std::result::Result<T, (&'static str, Error)>;

fn stage<T>(name: &'static str, r: Result<T>) -> Staged<T> {
    r.map_err(|e| (name, e))
}

impl Run<'_> {
    fn h(&self) -> HamiltonianParams {
        self.cfg.hamiltonian
    }

    fn residual(&mut self, name: &str, value: f64) {
        self.residuals.push(Residual { name: name.into(), value });
    }

    /// `ln(S~_j(0)/S~_j(t))` and, in the rotating frame, the rotated marginal.
    fn friction_integral(&mut self, t: f64, rotating: bool) -> Result<(f64, Option<RotatingSample>)> {
        let j = self.cfg.component;
        let h = self.h();
        let (s_t, rot) = if rotating {
            let (est, u) = self.ledger.rotating(t, j)?;
            (est.mean, Some((est, u)))
        } else {
            let q = self.ledger.position(t)?;
            let p = self.ledger.momentum(t)?;
            let st = CumulantState::from_physical(
                &h,
                t,
                &PhysicalCumulants { mean_q: q.mean, mean_p: p.mean, var_q: q.variance, var_p: p.variance, cov_qp: 0.0 },
            );
            let v = Propagators::new(&h).exp_tm(-t) * Vector2::from(st.s);
            (v[j], None)
        };
        Ok((crate::dynamics::lambda_integral_from_measurement(self.cfg.initial.s[j], s_t)?, rot))
    }

    fn integral(&mut self, t1: f64, t2: f64, tt: f64, held: Option<f64>, rotating: bool) -> Staged<()> {
        let h = self.h();
        let (m1, _) = stage("measure", self.friction_integral(t1, rotating))?;
        let (m2, _) = stage("measure", self.friction_integral(t2, rotating))?;
        let meas = [Measurement { t: t1, value: m1 }, Measurement { t: t2, value: m2 }];
        let sol = self.intersect(CurveKind::Integral, meas, held, |run, t| {
            run.friction_integral(t, rotating).map(|(v, _)| v)
        })?;
        let (a, r) = (sol.alpha_sq, sol.omega_c_over_omega);
        for m in &meas {
            let predicted = a * lambda_integral_per_alpha_sq(r * h.omega(), h.omega(), m.t);
            self.residual(&format!("friction_integral@{}", m.t), predicted - m.value);
        }

        let (measured, weights) = if rotating {
            let (_, rot) = stage("measure", self.friction_integral(tt, true))?;
            let (est, u) = rot.expect("rotating measurement");
            (est.variance, [u[0] * u[0], u[1] * u[1], 2.0 * u[0] * u[1]])
        } else {
            let q = stage("measure", self.ledger.position(tt))?;
            (h.mass() * h.omega() * q.variance / h.hbar(), [1.0, 0.0, 0.0])
        };
        let temp = stage(
            "temperature",
            integral_solve_temperature_weighted(
                measured,
                weights,
                &self.cfg.initial.x,
                a,
                r,
                &h,
                tt,
                &QuadOptions::default(),
            ),
        )?;
        self.found.kt_over_hbar_omega = Some(temp.kt_over_hbar_omega);
        self.diagnostics.temperature = Some(temp);
        Ok(())
    }

    fn rate(&mut self, t: f64, dt: f64) -> Result<Measurement> {
        let h = self.h();
        let q = self.ledger.position(t)?;
        let qn = self.ledger.position(t + dt)?;
        let p = self.ledger.momentum(t)?;
        let value = differential_factor(self.cfg.estimator, &h, q.mean, qn.mean, p.mean, dt)?;
        Ok(Measurement { t: rate_evaluation_time(self.cfg.estimator, t, dt), value })
    }

    fn differential(&mut self, t1: f64, t2: f64, tt: f64, held: Option<f64>, dt: f64) -> Staged<()> {
        let h = self.h();
        let meas = [stage("measure", self.rate(t1, dt))?, stage("measure", self.rate(t2, dt))?];
        let sol = self.intersect(CurveKind::Differential, meas, held, |run, t| run.rate(t, dt).map(|m| m.value))?;
        let (a, r) = (sol.alpha_sq, sol.omega_c_over_omega);
        for m in &meas {
            let predicted = a * lambda_per_alpha_sq(r * h.omega(), h.omega(), m.t) / h.omega();
            self.residual(&format!("friction_rate@{}", m.t), predicted - m.value);
        }

        let q = stage("measure", self.ledger.position(tt))?;
        let qn = stage("measure", self.ledger.position(tt + dt))?;
        let c = stage("measure", self.ledger.covariance(tt))?;
        let var_p = match self.cfg.estimator {
            RateEstimator::PropagatorCorrected => Some(stage("measure", self.ledger.momentum(tt))?.variance),
            RateEstimator::IncrementalRatio => None,
        };
        if c.robertson_breach {
            self.residual("covariance_uncertainty_breach", 1.0);
        }
        let meas = DiffusionMeasurement { var_q: q.variance, var_q_next: qn.variance, cov: c.cov, var_p };
        let temp = stage(
            "temperature",
            differential_solve_temperature(self.cfg.estimator, &meas, a, r, &h, tt, dt),
        )?;
        self.found.kt_over_hbar_omega = Some(temp.kt_over_hbar_omega);
        self.diagnostics.temperature = Some(temp);
        Ok(())
    }

    /// Solves the intersection, measuring the held-out time only if several roots appear.
    fn intersect<F>(
        &mut self,
        kind: CurveKind,
        meas: [Measurement; 2],
        held: Option<f64>,
        mut measure: F,
    ) -> Staged<IntersectionSolution>
    where
        F: FnMut(&mut Self, f64) -> Result<f64>,
    {
        let h = self.h();
        let grid = self.cfg.grid;
        let sol = match solve_intersection(kind, meas, &h, &grid, None) {
            Err(Error::MultipleRoots { roots }) => match held {
                Some(t3) => {
                    let v = stage("measure", measure(self, t3))?;
                    let t3 = match (kind, self.cfg.estimator) {
                        (CurveKind::Differential, e) => rate_evaluation_time(e, t3, self.cfg.schedule.omega_delta_t / h.omega()),
                        _ => t3,
                    };
                    stage("intersection", solve_intersection(kind, meas, &h, &grid, Some(Measurement { t: t3, value: v })))?
                }
                None => return Err(("intersection", Error::MultipleRoots { roots })),
            },
            other => stage("intersection", other)?,
        };
        self.found.alpha_sq = Some(sol.alpha_sq);
        self.found.omega_c_over_omega = Some(sol.omega_c_over_omega);
        self.residual("curve_gap", sol.curve_gap);
        self.diagnostics.intersection = Some(sol.clone());
        Ok(sol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{benchmark_delta_coeff, benchmark_lambda, lambda_integral_closed_form};
    use proptest::prelude::*;

    fn unit() -> HamiltonianParams {
        HamiltonianParams::default()
    }

    fn meas(t1: f64, v1: f64, t2: f64, v2: f64) -> [Measurement; 2] {
        [Measurement { t: t1, value: v1 }, Measurement { t: t2, value: v2 }]
    }

    #[test]
    fn figure_one_regimes() {
        let g = SearchGrid::default();
        let s = integral_solve_alpha_omegac(meas(0.5, 3.03e-3, 10.0, 9.70e-2), &unit(), &g, None).unwrap();
        assert!((s.alpha_sq - 0.01).abs() < 1e-3 && (s.omega_c_over_omega - 10.0).abs() < 0.1, "{s:?}");
        let s = integral_solve_alpha_omegac(meas(0.5, 4.55e-5, 10.0, 1.84e-2), &unit(), &g, None).unwrap();
        assert!((s.alpha_sq - 0.01).abs() < 1e-3 && (s.omega_c_over_omega - 0.5).abs() < 0.01, "{s:?}");
        assert_eq!(s.roots_considered.len(), 1);
    }

    #[test]
    fn figure_two_regimes() {
        let g = SearchGrid::default();
        let s = differential_solve_alpha_omegac(meas(0.5, 9.52e-3, 10.0, 9.90e-3), &unit(), &g, None).unwrap();
        assert!((s.alpha_sq - 0.01).abs() < 1e-3 && (s.omega_c_over_omega - 10.0).abs() < 0.1, "{s:?}");
        let s = differential_solve_alpha_omegac(meas(0.5, 2.59e-4, 10.0, 2.01e-3), &unit(), &g, None).unwrap();
        assert!((s.alpha_sq - 0.01).abs() < 1e-3 && (s.omega_c_over_omega - 0.5).abs() < 0.01, "{s:?}");
    }

    #[test]
    fn exact_integral_inputs_round_trip() {
        let h = unit();
        let tips = BenchmarkTips::new(0.05, 3.0, 1.0).unwrap();
        let m = meas(0.5, lambda_integral_closed_form(&tips, &h, 0.5), 10.0, lambda_integral_closed_form(&tips, &h, 10.0));
        let s = integral_solve_alpha_omegac(m, &h, &SearchGrid::default(), None).unwrap();
        assert!((s.alpha_sq / 0.05 - 1.0).abs() < 1e-6 && (s.omega_c_over_omega / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn curve_returns_truth_at_true_cutoff() {
        let h = HamiltonianParams::new(1.0, 2.0, 0.0, 1.0).unwrap();
        let tips = BenchmarkTips::new(0.02, 1.7, 3.0).unwrap();
        let wc = tips.omega_c(&h);
        for t in [0.3, 2.0, 7.5] {
            let m = Measurement { t, value: lambda_integral_closed_form(&tips, &h, t) };
            assert!((alpha_sq_curve(CurveKind::Integral, &m, wc, &h) - 0.02).abs() < 1e-10);
            let m = Measurement { t, value: benchmark_lambda(&tips, &h, t) / h.omega() };
            assert!((alpha_sq_curve(CurveKind::Differential, &m, wc, &h) - 0.02).abs() < 1e-10);
        }
    }

    #[test]
    fn inconsistent_measurements_have_no_bracket() {
        let r = integral_solve_alpha_omegac(meas(0.5, 1.0, 10.0, 1e-6), &unit(), &SearchGrid::default(), None);
        assert!(matches!(r, Err(Error::NoBracket { .. })), "{r:?}");
    }

    #[test]
    fn equal_times_rejected() {
        let r = integral_solve_alpha_omegac(meas(1.0, 0.1, 1.0, 0.1), &unit(), &SearchGrid::default(), None);
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn finite_difference_cases() {
        assert_eq!(finite_difference(1.0, 1.0, 0.1), 0.0);
        assert!((finite_difference(0.0, 0.01, 0.01) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn temperature_brackets_at_reference_cutoffs() {
        let h = unit();
        assert!((temperature_from_bracket(0.198, 0.01, 10.0, &h, 1.0).unwrap() - 10.0).abs() < 0.1);
        let exact = 2.0 * 0.01 * 0.25 / 1.25 * 10.0 * delta_bracket(0.5, 1.0, 1.0);
        assert!((exact - 0.067).abs() < 0.002);
        assert!((temperature_from_bracket(exact, 0.01, 0.5, &h, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!(matches!(temperature_from_bracket(0.1, 0.01, 10.0, &h, 0.0), Err(Error::DivisionNearZero { .. })));
    }

    #[test]
    fn integral_temperature_vanishing_time() {
        let r = integral_solve_temperature(&[0.8, 0.5, 0.1], &[0.8, 0.5, 0.1], 0, 0.01, 10.0, &unit(), 1e-9, &QuadOptions::default());
        assert!(matches!(r, Err(Error::DivisionNearZero { .. })), "{r:?}");
    }

    fn simulate(tips: &BenchmarkTips, h: &HamiltonianParams, times: &[f64]) -> Vec<CumulantState> {
        let model = BenchmarkModel::new(h).unwrap();
        let init = PipelineConfig::default().initial;
        let opts = EvolveOptions {
            ode: OdeOptions { rtol: 1e-12, atol: 1e-14, ..OdeOptions::default() },
            ..EvolveOptions::default()
        };
        evolve(&init, h, &model, &tips.to_vector(h), times, &opts).unwrap().samples
    }

    #[test]
    fn integral_temperature_from_exact_cumulants() {
        let h = unit();
        let tips = BenchmarkTips::new(0.01, 10.0, 10.0).unwrap();
        let x0 = PipelineConfig::default().initial.x;
        let st = simulate(&tips, &h, &[2.0])[0];
        let o = QuadOptions::default();
        let k0 = integral_solve_temperature(&st.x, &x0, 0, 0.01, 10.0, &h, 2.0, &o).unwrap();
        let k1 = integral_solve_temperature(&st.x, &x0, 1, 0.01, 10.0, &h, 2.0, &o).unwrap();
        assert!((k0.kt_over_hbar_omega / 10.0 - 1.0).abs() < 1e-4, "{k0:?}");
        assert!((k0.kt_over_hbar_omega - k1.kt_over_hbar_omega).abs() < 1e-6 * 10.0);
    }

    #[test]
    fn forward_difference_converges_linearly() {
        // exact d Var_q / dt from the equations of motion
        let h = unit();
        let tips = BenchmarkTips::new(0.02, 2.0, 4.0).unwrap();
        let t = 1.0;
        let dts = [1e-3, 1e-2];
        let mut times = vec![t];
        times.extend(dts.iter().map(|d| t + d));
        let sts = simulate(&tips, &h, &times);
        let x = sts[0].x;
        let lam = benchmark_lambda(&tips, &h, t);
        let exact = -2.0 * lam * x[0] + 2.0 * x[2] + benchmark_delta_coeff(&tips, &h, t);
        let errs: Vec<f64> = dts
            .iter()
            .enumerate()
            .map(|(i, d)| (finite_difference(x[0], sts[i + 1].x[0], *d) - exact).abs())
            .collect();
        for (e, d) in errs.iter().zip(dts) {
            assert!(*e <= 2.0 * d, "error {e} at dt {d}");
        }
        let ratio = errs[1] / errs[0];
        assert!(ratio > 8.0 && ratio < 12.0, "ratio {ratio}");
    }

    fn differential_inputs(tips: &BenchmarkTips, dt: f64) -> (Vec<CumulantState>, [f64; 2]) {
        let ts = [0.5, 10.0];
        (simulate(tips, &unit(), &[ts[0], ts[0] + dt, ts[1], ts[1] + dt]), ts)
    }

    fn differential_recovery(tips: &BenchmarkTips, dt: f64, est: RateEstimator) -> (f64, f64) {
        let h = unit();
        let (sts, ts) = differential_inputs(tips, dt);
        let mut m = [Measurement { t: 0.0, value: 0.0 }; 2];
        for i in 0..2 {
            let (a, b) = (sts[2 * i].to_physical(&h), sts[2 * i + 1].to_physical(&h));
            m[i] = Measurement {
                t: rate_evaluation_time(est, ts[i], dt),
                value: differential_factor(est, &h, a.mean_q, b.mean_q, a.mean_p, dt).unwrap(),
            };
        }
        let s = differential_solve_alpha_omegac(m, &h, &SearchGrid::default(), None).unwrap();
        (s.alpha_sq, s.omega_c_over_omega)
    }

    #[test]
    fn differential_bias_halves_with_step() {
        let tips = BenchmarkTips::new(0.02, 2.0, 4.0).unwrap();
        let e = |dt| {
            let (a, r) = differential_recovery(&tips, dt, RateEstimator::IncrementalRatio);
            ((a - 0.02) / 0.02).abs().max(((r - 2.0) / 2.0).abs())
        };
        let (e1, e2) = (e(1e-3), e(5e-4));
        assert!(e1 < 10.0 * 1e-3 * 10.0, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.2, "{e1} {e2}");
        let (a, r) = differential_recovery(&tips, 1e-3, RateEstimator::PropagatorCorrected);
        assert!(((a - 0.02) / 0.02).abs() < 1e-4 && ((r - 2.0) / 2.0).abs() < 1e-4, "{a} {r}");
    }

    #[test]
    fn differential_temperature_from_exact_cumulants() {
        let h = unit();
        let tips = BenchmarkTips::new(0.01, 10.0, 4.0).unwrap();
        let (t, dt) = (1.0, 1e-3);
        let sts = simulate(&tips, &h, &[t, t + dt]);
        let (a, b) = (sts[0].to_physical(&h), sts[1].to_physical(&h));
        let meas = DiffusionMeasurement { var_q: a.var_q, var_q_next: b.var_q, cov: a.cov_qp, var_p: Some(a.var_p) };
        for (est, tol) in [(RateEstimator::IncrementalRatio, 10.0 * dt), (RateEstimator::PropagatorCorrected, 1e-4)] {
            let k = differential_solve_temperature(est, &meas, 0.01, 10.0, &h, t, dt).unwrap();
            assert!((k.kt_over_hbar_omega / 4.0 - 1.0).abs() < tol, "{est:?}: {k:?}");
        }
    }

    #[test]
    fn generic_mecs_match_benchmark() {
        let h = unit();
        let tips = BenchmarkTips::new(0.03, 1.5, 5.0).unwrap();
        let (t, dt) = (2.0, 1e-3);
        let sts = simulate(&tips, &h, &[t, t + dt]);
        let mec = generic_differential_mecs(&|_| h, t, dt, &sts[0].to_physical(&h), &sts[1].to_physical(&h)).unwrap();
        let mid = crate::benchmark::benchmark_mecs(&tips, &h, t + 0.5 * dt);
        assert!((mec.lambda - mid.lambda).abs() < 1e-6 * mid.lambda.abs().max(1e-3));
        assert!((mec.d_qq - mid.d_qq).abs() < 1e-3 * mid.d_qq);
        assert!((mec.d_pp - mid.d_pp).abs() < 1e-3 * mid.d_pp);
        assert!(mec.d_qp.abs() < 1e-3 * mid.d_qq);
    }

    #[test]
    fn pipeline_budgets() {
        for (method, rotating, expected) in
            [(Method::Integral, false, 16), (Method::Integral, true, 8), (Method::Differential, false, 26)]
        {
            let cfg = PipelineConfig { method, rotating_frame: rotating, ..PipelineConfig::default() };
            let r = run_full_reconstruction(&cfg).unwrap();
            assert!(r.completed, "{:?}", r.failure);
            assert_eq!(r.total_points, expected, "{method:?} rotating={rotating}");
            assert_eq!(r.budget.entries().iter().map(|e| e.count).sum::<usize>(), r.total_points);
        }
    }

    #[test]
    fn pipeline_recovers_default_tips() {
        let cfg = PipelineConfig::default();
        let r = run_full_reconstruction(&cfg).unwrap();
        assert!(r.relative_errors.max().unwrap() < 1e-5, "{:?}", r.relative_errors);
        let cfg = PipelineConfig { rotating_frame: true, ..PipelineConfig::default() };
        let r = run_full_reconstruction(&cfg).unwrap();
        assert!(r.relative_errors.max().unwrap() < 1e-5, "{:?}", r.relative_errors);
        let cfg = PipelineConfig { method: Method::Differential, ..PipelineConfig::default() };
        let r = run_full_reconstruction(&cfg).unwrap();
        assert!(r.relative_errors.max().unwrap() < 1e-2, "{:?}", r.relative_errors);
    }

    #[test]
    fn covariance_is_recorded_once() {
        let cfg = PipelineConfig { method: Method::Differential, ..PipelineConfig::default() };
        let r = run_full_reconstruction(&cfg).unwrap();
        let count = |k| r.measurements.iter().filter(|m| m.kind == k).count();
        assert_eq!(count(MeasurementKind::Covariance), 1);
        assert_eq!(r.measurements.iter().map(|m| m.new_points).sum::<usize>(), r.total_points);
    }

    #[test]
    fn report_json_fields() {
        let r = run_full_reconstruction(&PipelineConfig::default()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for k in ["method", "tips_found", "residuals", "total_points", "roots_considered", "solver_diagnostics"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["method"], "integral");
        assert!(v["tips_found"]["kT_over_hbar_omega"].is_number());
    }

    #[test]
    fn invalid_config_is_an_error() {
        let mut cfg = PipelineConfig::default();
        cfg.schedule.omega_t = [1.0, 1.0];
        assert!(run_full_reconstruction(&cfg).is_err());
    }

    #[test]
    fn failure_is_reported_as_partial() {
        // a probe without position offset makes the friction integral undefined
        let mut cfg = PipelineConfig::default();
        cfg.initial.s = [0.0, 0.0];
        let r = run_full_reconstruction(&cfg).unwrap();
        assert!(!r.completed);
        let f = r.failure.unwrap();
        assert_eq!(f.stage, "measure");
        assert!(r.tips_found.alpha_sq.is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn integral_identity(a in 0.005..0.05f64, r in 0.3..20.0f64, k in 2.0..50.0f64) {
            let cfg = PipelineConfig { truth: BenchmarkTips::new(a, r, k).unwrap(), ..PipelineConfig::default() };
            let rep = run_full_reconstruction(&cfg).unwrap();
            prop_assert!(rep.completed, "{:?}", rep.failure);
            prop_assert!(rep.relative_errors.max().unwrap() <= 1e-5, "{:?}", rep.relative_errors);
        }

        #[test]
        fn differential_identity(a in 0.005..0.05f64, r in 0.3..20.0f64, k in 2.0..50.0f64) {
            let cfg = PipelineConfig {
                truth: BenchmarkTips::new(a, r, k).unwrap(),
                method: Method::Differential,
                ..PipelineConfig::default()
            };
            let rep = run_full_reconstruction(&cfg).unwrap();
            prop_assert!(rep.completed, "{:?}", rep.failure);
            prop_assert!(rep.relative_errors.max().unwrap() <= 10.0 * cfg.schedule.omega_delta_t, "{:?}", rep.relative_errors);
        }
    }
}

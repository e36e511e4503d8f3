//! Gaussian tomograms and the finite-point cumulant recovery.
//!
//! The forward side evaluates the marginal of a Gaussian Wigner function along the
//! line `X = mu q + nu p`. The inverse side recovers mean and variance of a line
//! from the peak value plus two or three off-centre samples, and the covariance
//! from two samples on a mixed line.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CumulantState, HamiltonianParams, PhysicalCumulants};
use crate::numerics::roots::{brent, roots_on_grid};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Half-width of the standardized-mean search interval.
const K_RANGE: f64 = 10.0;
const K_GRID_POINTS: usize = 201;
const EXACT_MATCH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomogramLine {
    pub mu: f64,
    pub nu: f64,
}

impl TomogramLine {
    pub const POSITION: Self = Self { mu: 1.0, nu: 0.0 };
    pub const MOMENTUM: Self = Self { mu: 0.0, nu: 1.0 };
    pub const DIAGONAL: Self = Self { mu: std::f64::consts::FRAC_1_SQRT_2, nu: std::f64::consts::FRAC_1_SQRT_2 };

    pub fn new(mu: f64, nu: f64) -> Result<Self> {
        let l = Self { mu, nu };
        l.check()?;
        Ok(l)
    }

    fn check(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.nu.is_finite()) || (self.mu == 0.0 && self.nu == 0.0) {
            return Err(Error::InvalidParameter(format!("tomogram line ({}, {})", self.mu, self.nu)));
        }
        Ok(())
    }

    pub fn mean(&self, c: &PhysicalCumulants) -> f64 {
        self.mu * c.mean_q + self.nu * c.mean_p
    }

    /// Variance of the marginal along this line.
    pub fn spread(&self, c: &PhysicalCumulants) -> f64 {
        self.mu * self.mu * c.var_q + self.nu * self.nu * c.var_p + 2.0 * self.mu * self.nu * c.cov_qp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomogramPoint {
    pub line: TomogramLine,
    pub x: f64,
    pub value: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn of(v: f64) -> Self {
        if v < 0.0 {
            Sign::Negative
        } else {
            Sign::Positive
        }
    }

    fn factor(self) -> f64 {
        match self {
            Sign::Positive => 1.0,
            Sign::Negative => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub time: f64,
    pub line: TomogramLine,
    pub count: usize,
}

/// Tomographic points consumed, grouped by tomogram (time and line).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointBudget {
    per_tomogram: Vec<BudgetEntry>,
    total: usize,
}

impl PointBudget {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, time: f64, line: TomogramLine, count: usize) {
        match self.per_tomogram.iter_mut().find(|e| e.time == time && e.line == line) {
            Some(e) => e.count += count,
            None => self.per_tomogram.push(BudgetEntry { time, line, count }),
        }
        self.total += count;
    }

    pub fn merge(&mut self, other: &PointBudget) {
        for e in &other.per_tomogram {
            self.add(e.time, e.line, e.count);
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[BudgetEntry] {
        &self.per_tomogram
    }

    pub fn tomogram_count(&self) -> usize {
        self.per_tomogram.len()
    }
}

/// JSON form of one sampled tomogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomogramSet {
    pub line: TomogramLine,
    pub points: Vec<SetPoint>,
    pub noise_sigma: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetPoint {
    pub x: f64,
    pub value: f64,
}

impl TomogramSet {
    pub fn from_points(points: &[TomogramPoint], seed: Option<u64>) -> Result<Self> {
        let first = points.first().ok_or_else(|| Error::InsufficientPoints("empty tomogram".into()))?;
        if points.iter().any(|p| p.line != first.line) {
            return Err(Error::InvalidParameter("points belong to different lines".into()));
        }
        Ok(Self {
            line: first.line,
            points: points.iter().map(|p| SetPoint { x: p.x, value: p.value }).collect(),
            noise_sigma: points.iter().map(|p| p.noise_sigma).fold(0.0, f64::max),
            seed,
        })
    }

    pub fn to_points(&self) -> Vec<TomogramPoint> {
        self.points
            .iter()
            .map(|p| TomogramPoint { line: self.line, x: p.x, value: p.value, noise_sigma: self.noise_sigma })
            .collect()
    }
}

/// Gaussian Wigner function of the state at phase-space point `(q, p)`, physical units.
pub fn wigner_gaussian(state: &CumulantState, h: &HamiltonianParams, q: f64, p: f64) -> Result<f64> {
    let c = state.to_physical(h);
    let det = c.determinant();
    if !(det > 0.0) || !(c.var_q > 0.0) || !(c.var_p > 0.0) {
        return Err(Error::DegenerateCovariance(det));
    }
    let (dq, dp) = (q - c.mean_q, p - c.mean_p);
    let quad = (c.var_q * dp * dp + c.var_p * dq * dq - 2.0 * c.cov_qp * dq * dp) / det;
    Ok((-0.5 * quad).exp() / (2.0 * PI * det.sqrt()))
}

/// Marginal density of the state along `line` at abscissa `x`.
pub fn radon_gaussian(state: &CumulantState, h: &HamiltonianParams, line: &TomogramLine, x: f64) -> Result<f64> {
    line.check()?;
    let c = state.to_physical(h);
    let v = line.spread(&c);
    if !(v > 0.0) {
        return Err(Error::DegenerateLine(v));
    }
    let d = x - line.mean(&c);
    Ok((-d * d / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
}

/// Evaluates the tomogram at `xs` with additive Gaussian noise on the values.
pub fn sample_tomogram(
    state: &CumulantState,
    h: &HamiltonianParams,
    line: &TomogramLine,
    xs: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<TomogramPoint>> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("noise_sigma = {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    xs.iter()
        .map(|&x| {
            let exact = radon_gaussian(state, h, line, x)?;
            let value = if noise_sigma > 0.0 { (exact + normal.sample(&mut rng)).max(0.0) } else { exact };
            Ok(TomogramPoint { line: *line, x, value, noise_sigma })
        })
        .collect()
}

/// Default abscissae for a first-cumulant tomogram given a prior spread scale.
pub fn first_cumulant_abscissae(scale: f64, sign_known: bool) -> Vec<f64> {
    let mut xs = vec![0.0, 1.5 * scale, -1.5 * scale];
    if !sign_known {
        xs.push(0.75 * scale);
    }
    xs
}

/// Default abscissae for the covariance tomogram, placed asymmetrically about the known mean.
pub fn covariance_abscissae(mean: f64, scale: f64) -> [f64; 2] {
    [mean + 1.5 * scale, mean - 0.75 * scale]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub mean: f64,
    pub variance: f64,
    pub used_points: usize,
}

/// A root with its linearized noise response: `shared` to the common reference value,
/// `own` to the point's own value (both already multiplied by the noise level).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    root: f64,
    shared: f64,
    own: f64,
}

fn check_points(points: &[TomogramPoint]) -> Result<TomogramLine> {
    let first = points.first().ok_or_else(|| Error::InsufficientPoints("no points".into()))?;
    first.line.check()?;
    for p in points {
        if p.line != first.line {
            return Err(Error::InvalidParameter("points belong to different lines".into()));
        }
        if !(p.value.is_finite() && p.value >= 0.0) || !p.x.is_finite() {
            return Err(Error::InvalidDensity(format!("value {} at x = {}", p.value, p.x)));
        }
    }
    Ok(first.line)
}

/// Residual in the standardized mean `k = mean / Delta`, where `Delta(k) = exp(-k^2/2) / (w0 sqrt(2 pi))`.
///
/// Returns the residual together with its `k`, `w0` and `wj` derivatives.
fn mean_residual(k: f64, x: f64, w0: f64, wj: f64) -> (f64, f64, f64, f64) {
    let c = (w0 / wj).ln();
    let y = x * w0 * SQRT_2PI * (0.5 * k * k).exp();
    let g = 2.0 * c + 2.0 * y * k - y * y;
    let dg_dy = 2.0 * k - 2.0 * y;
    let dg_dk = 2.0 * y + dg_dy * y * k;
    let dg_dw0 = 2.0 / w0 + dg_dy * y / w0;
    let dg_dwj = -2.0 / wj;
    (g, dg_dk, dg_dw0, dg_dwj)
}

fn mean_candidates(x: f64, w0: f64, wj: f64, sigma: f64) -> Result<Vec<Candidate>> {
    let n = K_GRID_POINTS;
    let grid: Vec<f64> = (0..n).map(|i| -K_RANGE + 2.0 * K_RANGE * i as f64 / (n - 1) as f64).collect();
    let roots = roots_on_grid(|k| mean_residual(k, x, w0, wj).0, &grid, 1e-14, 1e-12)?;
    Ok(roots
        .into_iter()
        .map(|r| {
            let (_, dk, dw0, dwj) = mean_residual(r.x, x, w0, wj);
            let dk = if dk == 0.0 { 1e-300 } else { dk };
            Candidate { root: r.x, shared: -sigma * dw0 / dk, own: -sigma * dwj / dk }
        })
        .collect())
}

fn pair_tolerance(a: &Candidate, b: &Candidate, scale: f64) -> f64 {
    let spread = (a.shared - b.shared).hypot(a.own.hypot(b.own));
    EXACT_MATCH_TOL * scale + 3.0 * spread
}

/// Best value common to every candidate set, as `(value, normalized mismatch)`.
///
/// Every other set contributes its nearest candidate to each member of the first set.
fn common_roots(sets: &[Vec<Candidate>], relative: bool) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for a in &sets[0] {
        let mut chosen = vec![*a];
        for other in &sets[1..] {
            match other
                .iter()
                .min_by(|u, v| (u.root - a.root).abs().total_cmp(&(v.root - a.root).abs()))
            {
                Some(b) => chosen.push(*b),
                None => break,
            }
        }
        if chosen.len() != sets.len() {
            continue;
        }
        let mut worst: f64 = 0.0;
        for i in 0..chosen.len() {
            for j in i + 1..chosen.len() {
                let scale = if relative { chosen[i].root.abs().max(chosen[j].root.abs()) } else { 1.0 };
                let tol = pair_tolerance(&chosen[i], &chosen[j], scale);
                worst = worst.max((chosen[i].root - chosen[j].root).abs() / tol);
            }
        }
        if worst <= 1.0 {
            let value = chosen.iter().map(|c| c.root).sum::<f64>() / chosen.len() as f64;
            out.push((value, worst));
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1));
    out
}

/// Mean and variance of a Gaussian tomogram from its value at `x = 0` plus two
/// (sign known) or three (sign unknown) further points.
///
/// Points beyond those needed are ignored and not counted.
pub fn recover_mean_and_variance(points: &[TomogramPoint], sign_known: Option<Sign>) -> Result<MarginalEstimate> {
    check_points(points)?;
    let zero = points
        .iter()
        .find(|p| p.x == 0.0)
        .ok_or_else(|| Error::InsufficientPoints("no point at x = 0".into()))?;
    let need = if sign_known.is_some() { 2 } else { 3 };
    let mut others: Vec<&TomogramPoint> = Vec::new();
    for p in points.iter().filter(|p| p.x != 0.0) {
        if !others.iter().any(|o| o.x == p.x) {
            others.push(p);
        }
        if others.len() == need {
            break;
        }
    }
    if others.len() < need {
        return Err(Error::InsufficientPoints(format!(
            "{} distinct nonzero abscissae, need {need}",
            others.len()
        )));
    }
    let w0 = zero.value;
    if !(w0 > 0.0) {
        return Err(Error::InvalidDensity(format!("tomogram vanishes at x = 0 ({w0})")));
    }
    let used = std::iter::once(zero).chain(others.iter().copied());
    let sigma = used.map(|p| p.noise_sigma).fold(0.0, f64::max);

    let mut sets = Vec::with_capacity(need);
    for p in &others {
        if !(p.value > 0.0) {
            return Err(Error::InvalidDensity(format!("tomogram vanishes at x = {}", p.x)));
        }
        let mut c = mean_candidates(p.x, w0, p.value, sigma)?;
        if let Some(s) = sign_known {
            c.retain(|c| s.factor() * c.root >= -(EXACT_MATCH_TOL + 3.0 * c.shared.hypot(c.own)));
        }
        sets.push(c);
    }
    let matches = common_roots(&sets, false);
    let (k, _) = *matches
        .first()
        .ok_or_else(|| Error::NoCommonRoot(format!("mean/variance roots per point: {:?}", root_lists(&sets))))?;
    if sigma == 0.0 {
        if let Some(&(k2, _)) = matches.iter().find(|m| (m.0 - k).abs() > 10.0 * EXACT_MATCH_TOL) {
            return Err(Error::AmbiguousBranch(format!("standardized means {k} and {k2} both fit")));
        }
    }
    let k = match sign_known {
        Some(s) if s.factor() * k < 0.0 => 0.0,
        _ => k,
    };
    let delta = (-0.5 * k * k).exp() / (w0 * SQRT_2PI);
    Ok(MarginalEstimate { mean: k * delta, variance: delta * delta, used_points: need + 1 })
}

fn root_lists(sets: &[Vec<Candidate>]) -> Vec<Vec<f64>> {
    sets.iter().map(|s| s.iter().map(|c| c.root).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    pub cov: f64,
    /// Recovered variance of the mixed-line marginal.
    pub spread: f64,
    pub used_points: usize,
    /// Set when the recovered covariance violates the uncertainty relation beyond tolerance.
    pub robertson_breach: bool,
}

/// Candidate variances of a Gaussian with known mean `m` taking value `w` at `x`.
fn spread_candidates(x: f64, m: f64, w: f64, sigma: f64) -> Result<Vec<Candidate>> {
    let d = (x - m) * (x - m);
    if d == 0.0 {
        let v = 1.0 / (2.0 * PI * w * w);
        return Ok(vec![Candidate { root: v, shared: 0.0, own: 2.0 * v * sigma / w }]);
    }
    let base = w.ln() + 0.5 * (2.0 * PI * d).ln();
    let h = |u: f64| base + 0.5 * u.ln() + 0.5 / u;
    let to_candidate = |u: f64| {
        let v = u * d;
        let dh_dv = (0.5 / v * (1.0 - d / v)).abs().max(1e-300);
        Candidate { root: v, shared: 0.0, own: sigma / w / dh_dv }
    };
    if h(1.0) >= 0.0 {
        return Ok(vec![to_candidate(1.0)]);
    }
    let mut lo = 0.5;
    while h(lo) < 0.0 {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::NoBracket { lo, hi: 1.0 });
        }
    }
    let mut hi = 2.0;
    while h(hi) < 0.0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::NoBracket { lo: 1.0, hi });
        }
    }
    let left = brent(h, lo, 1.0, 0.0, 1e-14, 200)?;
    let right = brent(h, 1.0, hi, 0.0, 1e-14, 200)?;
    Ok(vec![to_candidate(left.x), to_candidate(right.x)])
}

/// Covariance from two points on a mixed line (`mu nu != 0`), given the means and variances.
pub fn recover_covariance(
    points: &[TomogramPoint],
    known_means: (f64, f64),
    known_variances: (f64, f64),
    hbar: f64,
) -> Result<CovarianceEstimate> {
    let line = check_points(points)?;
    if line.mu * line.nu == 0.0 {
        return Err(Error::InvalidParameter("covariance needs a line with mu nu != 0".into()));
    }
    let mut used: Vec<&TomogramPoint> = Vec::new();
    for p in points {
        if !used.iter().any(|o| o.x == p.x) {
            used.push(p);
        }
        if used.len() == 2 {
            break;
        }
    }
    if used.len() < 2 {
        return Err(Error::InsufficientPoints("covariance needs two distinct abscissae".into()));
    }
    let m = line.mu * known_means.0 + line.nu * known_means.1;
    let sigma = used.iter().map(|p| p.noise_sigma).fold(0.0, f64::max);
    let mut sets = Vec::with_capacity(2);
    for p in &used {
        if !(p.value > 0.0) {
            return Err(Error::InvalidDensity(format!("tomogram vanishes at x = {}", p.x)));
        }
        sets.push(spread_candidates(p.x, m, p.value, sigma)?);
    }
    let matches = common_roots(&sets, true);
    let (v, _) = *matches
        .first()
        .ok_or_else(|| Error::NoCommonRoot(format!("spread roots per point: {:?}", root_lists(&sets))))?;
    let (vq, vp) = known_variances;
    let cov = (v - line.mu * line.mu * vq - line.nu * line.nu * vp) / (2.0 * line.mu * line.nu);
    let tol = 1e-9 * hbar * hbar + 3.0 * sigma * vq.max(vp);
    let robertson_breach = vq * vp - cov * cov < 0.25 * hbar * hbar - tol;
    Ok(CovarianceEstimate { cov, spread: v, used_points: 2, robertson_breach })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulantReconstruction {
    pub state: CumulantState,
    pub physical: PhysicalCumulants,
    pub budget: PointBudget,
    pub robertson_breach: bool,
}

/// Full five-cumulant recovery from position, momentum and mixed-line tomograms at time `t`.
pub fn reconstruct_cumulants(
    h: &HamiltonianParams,
    t: f64,
    q_points: &[TomogramPoint],
    p_points: &[TomogramPoint],
    mixed_points: &[TomogramPoint],
    signs: (Option<Sign>, Option<Sign>),
) -> Result<CumulantReconstruction> {
    let lq = check_points(q_points)?;
    let lp = check_points(p_points)?;
    let lm = check_points(mixed_points)?;
    if lq.nu != 0.0 || lp.mu != 0.0 {
        return Err(Error::InvalidParameter("expected position (nu = 0) and momentum (mu = 0) lines".into()));
    }
    let q = recover_mean_and_variance(q_points, signs.0)?;
    let p = recover_mean_and_variance(p_points, signs.1)?;
    let (mean_q, var_q) = (q.mean / lq.mu, q.variance / (lq.mu * lq.mu));
    let (mean_p, var_p) = (p.mean / lp.nu, p.variance / (lp.nu * lp.nu));
    let c = recover_covariance(mixed_points, (mean_q, mean_p), (var_q, var_p), h.hbar())?;
    let mut budget = PointBudget::new();
    budget.add(t, lq, q.used_points);
    budget.add(t, lp, p.used_points);
    budget.add(t, lm, c.used_points);
    let physical = PhysicalCumulants { mean_q, mean_p, var_q, var_p, cov_qp: c.cov };
    Ok(CumulantReconstruction {
        state: CumulantState::from_physical(h, t, &physical),
        physical,
        budget,
        robertson_breach: c.robertson_breach,
    })
}

/// Samples the three standard tomograms of `state` with the default placements and reconstructs.
pub fn measure_and_reconstruct(
    state: &CumulantState,
    h: &HamiltonianParams,
    prior: &PhysicalCumulants,
    signs: (Option<Sign>, Option<Sign>),
    noise_sigma: f64,
    seed: u64,
) -> Result<CumulantReconstruction> {
    let xq = first_cumulant_abscissae(prior.var_q.sqrt(), signs.0.is_some());
    let xp = first_cumulant_abscissae(prior.var_p.sqrt(), signs.1.is_some());
    let qs = sample_tomogram(state, h, &TomogramLine::POSITION, &xq, noise_sigma, seed)?;
    let ps = sample_tomogram(state, h, &TomogramLine::MOMENTUM, &xp, noise_sigma, seed.wrapping_add(1))?;
    let q = recover_mean_and_variance(&qs, signs.0)?;
    let p = recover_mean_and_variance(&ps, signs.1)?;
    let line = TomogramLine::DIAGONAL;
    let mixed_mean = line.mu * q.mean + line.nu * p.mean;
    let xm = covariance_abscissae(mixed_mean, line.spread(prior).max(f64::MIN_POSITIVE).sqrt());
    let ms = sample_tomogram(state, h, &line, &xm, noise_sigma, seed.wrapping_add(2))?;
    reconstruct_cumulants(h, state.t, &qs, &ps, &ms, signs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::quad::{integrate, QuadOptions};
    use proptest::prelude::*;

    fn unit() -> HamiltonianParams {
        HamiltonianParams::natural(0.0)
    }

    fn generic() -> CumulantState {
        CumulantState::new(0.0, [0.4, -0.7], [1.3, 0.9, 0.35]).unwrap()
    }

    #[test]
    fn vacuum_peak() {
        let st = CumulantState::new(0.0, [0.0, 0.0], [0.5, 0.5, 0.0]).unwrap();
        let w = wigner_gaussian(&st, &unit(), 0.0, 0.0).unwrap();
        assert!((w - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn wigner_prefactor_at_mean() {
        let h = HamiltonianParams::new(2.0, 0.7, 0.0, 1.3).unwrap();
        let st = generic();
        let c = st.to_physical(&h);
        let w = wigner_gaussian(&st, &h, c.mean_q, c.mean_p).unwrap();
        assert!((w - 1.0 / (2.0 * PI * c.determinant().sqrt())).abs() < 1e-14);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let st = CumulantState { t: 0.0, s: [0.0; 2], x: [1.0, 1.0, 1.0] };
        assert!(matches!(wigner_gaussian(&st, &unit(), 0.0, 0.0), Err(Error::DegenerateCovariance(_))));
    }

    fn nested<F: Fn(f64, f64) -> f64>(f: F, (q0, q1): (f64, f64), (p0, p1): (f64, f64)) -> f64 {
        let o = QuadOptions { abs_tol: 1e-11, rel_tol: 1e-11, max_intervals: 4000 };
        integrate(|q| integrate(|p| f(q, p), p0, p1, &o).unwrap().value, q0, q1, &o).unwrap().value
    }

    #[test]
    fn wigner_normalized_by_quadrature() {
        let (h, st) = (unit(), generic());
        let c = st.to_physical(&h);
        let (sq, sp) = (c.var_q.sqrt(), c.var_p.sqrt());
        let total = nested(
            |q, p| wigner_gaussian(&st, &h, q, p).unwrap(),
            (c.mean_q - 10.0 * sq, c.mean_q + 10.0 * sq),
            (c.mean_p - 10.0 * sp, c.mean_p + 10.0 * sp),
        );
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn marginals_on_axes() {
        let h = HamiltonianParams::new(1.7, 0.6, 0.0, 0.8).unwrap();
        let st = generic();
        let c = st.to_physical(&h);
        for x in [-2.0, -0.3, 0.0, 0.9, 3.1] {
            let pos = (-(x - c.mean_q).powi(2) / (2.0 * c.var_q)).exp() / (2.0 * PI * c.var_q).sqrt();
            let mom = (-(x - c.mean_p).powi(2) / (2.0 * c.var_p)).exp() / (2.0 * PI * c.var_p).sqrt();
            assert_eq!(radon_gaussian(&st, &h, &TomogramLine::POSITION, x).unwrap(), pos);
            assert_eq!(radon_gaussian(&st, &h, &TomogramLine::MOMENTUM, x).unwrap(), mom);
        }
    }

    #[test]
    fn diagonal_line_matches_delta_quadrature() {
        // integrate W along the line mu q + nu p = x, parametrized by the orthogonal coordinate
        let (h, st) = (unit(), generic());
        let l = TomogramLine::DIAGONAL;
        let o = QuadOptions { abs_tol: 1e-12, rel_tol: 1e-12, max_intervals: 4000 };
        for x in [-1.0, -0.2, 0.5, 1.4] {
            let along = |s: f64| {
                let (q, p) = (l.mu * x - l.nu * s, l.nu * x + l.mu * s);
                wigner_gaussian(&st, &h, q, p).unwrap()
            };
            let direct = integrate(along, -15.0, 15.0, &o).unwrap().value;
            let radon = radon_gaussian(&st, &h, &l, x).unwrap();
            assert!((direct - radon).abs() < 1e-6, "x = {x}: {direct} vs {radon}");
        }
    }

    #[test]
    fn degenerate_line_rejected() {
        let st = CumulantState { t: 0.0, s: [0.0; 2], x: [1.0, 1.0, 1.0] };
        let l = TomogramLine::new(1.0, -1.0).unwrap();
        assert!(matches!(radon_gaussian(&st, &unit(), &l, 0.0), Err(Error::DegenerateLine(_))));
        assert!(TomogramLine::new(0.0, 0.0).is_err());
    }

    #[test]
    fn noiseless_and_reproducible_sampling() {
        let (h, st) = (unit(), generic());
        let xs = [-1.0, 0.0, 0.5];
        let exact = sample_tomogram(&st, &h, &TomogramLine::DIAGONAL, &xs, 0.0, 1).unwrap();
        for p in &exact {
            assert_eq!(p.value, radon_gaussian(&st, &h, &TomogramLine::DIAGONAL, p.x).unwrap());
        }
        let a = sample_tomogram(&st, &h, &TomogramLine::DIAGONAL, &xs, 0.05, 42).unwrap();
        let b = sample_tomogram(&st, &h, &TomogramLine::DIAGONAL, &xs, 0.05, 42).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_ne!(a, exact);
    }

    #[test]
    fn monte_carlo_noise_is_unbiased() {
        let (h, st) = (unit(), generic());
        let x = 0.4;
        let pts = sample_tomogram(&st, &h, &TomogramLine::POSITION, &vec![x; 10_000], 0.01, 7).unwrap();
        let mean = pts.iter().map(|p| p.value).sum::<f64>() / pts.len() as f64;
        let exact = radon_gaussian(&st, &h, &TomogramLine::POSITION, x).unwrap();
        assert!((mean - exact).abs() < 3e-4);
    }

    fn position_points(mean: f64, var: f64, xs: &[f64]) -> Vec<TomogramPoint> {
        let st = CumulantState::new(0.0, [mean, 0.0], [var, 1.0, 0.0]).unwrap();
        sample_tomogram(&st, &unit(), &TomogramLine::POSITION, xs, 0.0, 0).unwrap()
    }

    #[test]
    fn mean_and_variance_sign_known() {
        let pts = position_points(0.7, 0.9, &first_cumulant_abscissae(0.9f64.sqrt(), true));
        let r = recover_mean_and_variance(&pts, Some(Sign::Positive)).unwrap();
        assert!((r.mean - 0.7).abs() < 1e-8 && (r.variance - 0.9).abs() < 1e-8, "{r:?}");
        assert_eq!(r.used_points, 3);
    }

    #[test]
    fn zero_mean_from_either_branch() {
        let pts = position_points(0.0, 1.4, &[0.0, 1.2, -0.6, 0.9]);
        for s in [Some(Sign::Positive), Some(Sign::Negative), None] {
            let r = recover_mean_and_variance(&pts, s).unwrap();
            assert!(r.mean.abs() < 1e-9 && (r.variance - 1.4).abs() < 1e-9, "{s:?}: {r:?}");
        }
    }

    #[test]
    fn negative_branch_without_sign() {
        let pts = position_points(-0.3, 0.8, &first_cumulant_abscissae(0.8f64.sqrt(), false));
        let r = recover_mean_and_variance(&pts, None).unwrap();
        assert!((r.mean + 0.3).abs() < 1e-8 && (r.variance - 0.8).abs() < 1e-8, "{r:?}");
        assert_eq!(r.used_points, 4);
    }

    #[test]
    fn extra_points_are_not_counted() {
        let pts = position_points(1.1, 0.7, &[0.0, 1.0, -1.0, 0.5, 2.0, -2.0]);
        assert_eq!(recover_mean_and_variance(&pts, Some(Sign::Positive)).unwrap().used_points, 3);
        assert_eq!(recover_mean_and_variance(&pts, None).unwrap().used_points, 4);
    }

    #[test]
    fn missing_points_rejected() {
        let pts = position_points(0.2, 0.7, &[0.0, 1.0]);
        assert!(matches!(recover_mean_and_variance(&pts, Some(Sign::Positive)), Err(Error::InsufficientPoints(_))));
        let pts = position_points(0.2, 0.7, &[0.5, 1.0, 1.5]);
        assert!(matches!(recover_mean_and_variance(&pts, Some(Sign::Positive)), Err(Error::InsufficientPoints(_))));
    }

    #[test]
    fn inconsistent_data_has_no_common_root() {
        let mut pts = position_points(0.5, 1.0, &[0.0, 1.5, -1.5]);
        pts[1].value *= 1.3;
        assert!(matches!(recover_mean_and_variance(&pts, Some(Sign::Positive)), Err(Error::NoCommonRoot(_))));
    }

    #[test]
    fn vanishing_peak_is_invalid_density() {
        let mut pts = position_points(0.5, 1.0, &[0.0, 1.5, -1.5]);
        pts[0].value = 0.0;
        assert!(matches!(recover_mean_and_variance(&pts, Some(Sign::Positive)), Err(Error::InvalidDensity(_))));
    }

    fn covariance_case(cov: f64, vq: f64, vp: f64) -> CovarianceEstimate {
        let st = CumulantState::new(0.0, [0.3, -0.4], [vq, vp, cov]).unwrap();
        let l = TomogramLine::DIAGONAL;
        let c = st.to_physical(&unit());
        let xs = covariance_abscissae(l.mean(&c), l.spread(&c).sqrt());
        let pts = sample_tomogram(&st, &unit(), &l, &xs, 0.0, 0).unwrap();
        recover_covariance(&pts, (0.3, -0.4), (vq, vp), 1.0).unwrap()
    }

    #[test]
    fn covariance_round_trips() {
        let r = covariance_case(0.0, 0.9, 0.7);
        assert!(r.cov.abs() < 1e-8 && !r.robertson_breach);
        let r = covariance_case(0.2, 0.6, 0.6);
        assert!((r.cov - 0.2).abs() < 1e-8 && !r.robertson_breach);
        assert_eq!(r.used_points, 2);
    }

    #[test]
    fn covariance_flags_uncertainty_violation() {
        let st = CumulantState::new(0.0, [0.0, 0.0], [0.6, 0.6, 0.2]).unwrap();
        let pts = sample_tomogram(&st, &unit(), &TomogramLine::DIAGONAL, &[0.9, -0.5], 0.0, 0).unwrap();
        // pretend the variances were smaller than they are
        let r = recover_covariance(&pts, (0.0, 0.0), (0.5, 0.5), 1.0).unwrap();
        assert!(r.robertson_breach);
    }

    fn full(st: &CumulantState, signs: (Option<Sign>, Option<Sign>)) -> CumulantReconstruction {
        let h = unit();
        measure_and_reconstruct(st, &h, &st.to_physical(&h), signs, 0.0, 0).unwrap()
    }

    #[test]
    fn budgets_of_eight_and_ten() {
        let st = generic();
        let known = full(&st, (Some(Sign::Positive), Some(Sign::Negative)));
        assert_eq!(known.budget.total(), 8);
        assert_eq!(known.budget.tomogram_count(), 3);
        let unknown = full(&st, (None, None));
        assert_eq!(unknown.budget.total(), 10);
        for r in [known, unknown] {
            for i in 0..2 {
                assert!((r.state.s[i] - st.s[i]).abs() < 1e-7);
            }
            for i in 0..3 {
                assert!((r.state.x[i] - st.x[i]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn budget_total_tracks_entries() {
        let mut b = PointBudget::new();
        b.add(0.0, TomogramLine::POSITION, 4);
        b.add(0.0, TomogramLine::POSITION, 2);
        b.add(1.0, TomogramLine::POSITION, 3);
        assert_eq!(b.total(), 9);
        assert_eq!(b.entries().iter().map(|e| e.count).sum::<usize>(), b.total());
        assert_eq!(b.tomogram_count(), 2);
    }

    #[test]
    fn tomogram_set_json() {
        let pts = position_points(0.2, 0.7, &[0.0, 1.0]);
        let set = TomogramSet::from_points(&pts, Some(9)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&set).unwrap();
        assert_eq!(v["line"]["mu"], 1.0);
        assert_eq!(v["points"][1]["x"], 1.0);
        assert_eq!(v["seed"], 9);
        let back: TomogramSet = serde_json::from_value(v).unwrap();
        assert_eq!(back.to_points(), pts);
    }

    fn state_strategy() -> impl Strategy<Value = CumulantState> {
        (-3.0..3.0f64, -3.0..3.0f64, 0.5..5.0f64, 0.5..5.0f64, -1.0..1.0f64).prop_filter_map(
            "margin",
            |(a, b, vq, vp, r)| {
                let bound = (vq * vp - 0.30).max(0.0).sqrt();
                CumulantState::new(0.0, [a, b], [vq, vp, r * bound]).ok()
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn normalization(st in state_strategy(), mu in -2.0..2.0f64, nu in -2.0..2.0f64) {
            prop_assume!(mu.abs() + nu.abs() > 0.1);
            let h = unit();
            let l = TomogramLine::new(mu, nu).unwrap();
            let c = st.to_physical(&h);
            let (m, s) = (l.mean(&c), l.spread(&c).sqrt());
            let o = QuadOptions::default();
            let total = integrate(|x| radon_gaussian(&st, &h, &l, x).unwrap(), m - 20.0 * s, m + 20.0 * s, &o).unwrap().value;
            prop_assert!((total - 1.0).abs() < 1e-8);
        }

        #[test]
        fn line_scaling(st in state_strategy(), mu in -2.0..2.0f64, nu in -2.0..2.0f64, c in 0.1..10.0f64, x in -3.0..3.0f64) {
            prop_assume!(mu.abs() + nu.abs() > 0.1);
            let h = unit();
            let l = TomogramLine::new(mu, nu).unwrap();
            let scaled = TomogramLine::new(c * mu, c * nu).unwrap();
            let a = radon_gaussian(&st, &h, &l, x).unwrap();
            let b = radon_gaussian(&st, &h, &scaled, c * x).unwrap();
            prop_assert!((b - a / c).abs() <= 1e-12 * (a / c).max(1e-300));
        }

        #[test]
        fn round_trip(st in state_strategy(), known in any::<bool>()) {
            let signs = if known { (Some(Sign::of(st.s[0])), Some(Sign::of(st.s[1]))) } else { (None, None) };
            let r = full(&st, signs);
            for i in 0..2 {
                prop_assert!((r.state.s[i] - st.s[i]).abs() < 1e-6, "{:?} vs {:?}", r.state, st);
            }
            for i in 0..3 {
                prop_assert!((r.state.x[i] - st.x[i]).abs() < 1e-6, "{:?} vs {:?}", r.state, st);
            }
            prop_assert_eq!(r.budget.total(), if known { 8 } else { 10 });
        }
    }
}

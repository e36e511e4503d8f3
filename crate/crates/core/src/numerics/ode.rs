//! Dormand-Prince 5(4) embedded Runge-Kutta integrator for small fixed-size systems.

use crate::error::{Error, Result};

/// Step-size control settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Upper bound on the step length; `None` leaves it unbounded.
    pub max_step: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-9,
            max_steps: 1_000_000,
            max_step: None,
        }
    }
}

/// Counters accumulated over one or more integration spans.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Largest scaled local error estimate among accepted steps (<= 1 by construction).
    pub max_scaled_error: f64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// b - b* (fifth minus embedded fourth order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

fn scaled_norm<const N: usize>(err: &[f64; N], y0: &[f64; N], y1: &[f64; N], opts: &OdeOptions) -> f64 {
    let sum: f64 = (0..N)
        .map(|i| {
            let sc = opts.atol + opts.rtol * y0[i].abs().max(y1[i].abs());
            (err[i] / sc).powi(2)
        })
        .sum();
    (sum / N as f64).sqrt()
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t_end` (`t_end >= t0`), landing exactly on `t_end`.
///
/// `on_step` is invoked after every accepted step with the new time and state.
pub fn integrate<const N: usize, F, S>(
    mut f: F,
    t0: f64,
    y0: [f64; N],
    t_end: f64,
    opts: &OdeOptions,
    stats: &mut OdeStats,
    mut on_step: S,
) -> Result<[f64; N]>
where
    F: FnMut(f64, &[f64; N]) -> Result<[f64; N]>,
    S: FnMut(f64, &[f64; N]),
{
    if !(t_end >= t0) {
        return Err(Error::InvalidParameter(format!(
            "integration span [{t0}, {t_end}] is not forward"
        )));
    }
    if t_end == t0 {
        return Ok(y0);
    }
    let span = t_end - t0;
    let max_step = opts.max_step.unwrap_or(span).min(span);

    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y)?;
    stats.rhs_evals += 1;

    let mut h = initial_step(&mut f, t, &y, &k1, opts, stats)?.min(max_step);
    let mut steps = 0usize;
    let mut last_rejected = false;

    loop {
        let remaining = t_end - t;
        if remaining <= 1e-14 * t_end.abs().max(1.0) {
            break;
        }
        if steps >= opts.max_steps {
            return Err(Error::IntegrationFailure {
                t,
                reason: format!("step budget of {} exhausted", opts.max_steps),
            });
        }
        steps += 1;

        let hit_end = h >= remaining;
        let h_try = if hit_end { remaining } else { h };
        if h_try <= 1e-15 * t.abs().max(1.0) {
            return Err(Error::IntegrationFailure {
                t,
                reason: format!("step size underflow (h = {h_try:e})"),
            });
        }

        let k2 = f(t + C2 * h_try, &axpy(&y, h_try, &[(A21, &k1)]))?;
        let k3 = f(t + C3 * h_try, &axpy(&y, h_try, &[(A31, &k1), (A32, &k2)]))?;
        let k4 = f(
            t + C4 * h_try,
            &axpy(&y, h_try, &[(A41, &k1), (A42, &k2), (A43, &k3)]),
        )?;
        let k5 = f(
            t + C5 * h_try,
            &axpy(&y, h_try, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
        )?;
        let k6 = f(
            t + h_try,
            &axpy(
                &y,
                h_try,
                &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)],
            ),
        )?;
        let y_new = axpy(
            &y,
            h_try,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
        );
        let t_new = if hit_end { t_end } else { t + h_try };
        let k7 = f(t_new, &y_new)?;
        stats.rhs_evals += 6;

        let mut err = [0.0; N];
        for i in 0..N {
            err[i] = h_try
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let en = scaled_norm(&err, &y, &y_new, opts);
        if !en.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationFailure {
                t,
                reason: "non-finite state or error estimate".into(),
            });
        }

        if en <= 1.0 {
            t = t_new;
            y = y_new;
            k1 = k7;
            stats.accepted += 1;
            stats.max_scaled_error = stats.max_scaled_error.max(en);
            on_step(t, &y);
            let mut fac = if en == 0.0 { 5.0 } else { 0.9 * en.powf(-0.2) };
            fac = fac.clamp(0.2, 5.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            last_rejected = false;
            h = (h_try * fac).min(max_step);
        } else {
            stats.rejected += 1;
            last_rejected = true;
            h = h_try * (0.9 * en.powf(-0.2)).max(0.2);
        }
    }
    Ok(y)
}

fn initial_step<const N: usize, F>(
    f: &mut F,
    t: f64,
    y: &[f64; N],
    f0: &[f64; N],
    opts: &OdeOptions,
    stats: &mut OdeStats,
) -> Result<f64>
where
    F: FnMut(f64, &[f64; N]) -> Result<[f64; N]>,
{
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / N as f64).sqrt();
    let d1 = (f0.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / N as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = axpy(y, h0, &[(1.0, f0)]);
    let f1 = f(t + h0, &y1)?;
    stats.rhs_evals += 1;
    let d2 = (f1
        .iter()
        .zip(f0)
        .zip(&sc)
        .map(|((a, b), s)| ((a - b) / s).powi(2))
        .sum::<f64>()
        / N as f64)
        .sqrt()
        / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let mut stats = OdeStats::default();
        let y = integrate(
            |_, y: &[f64; 1]| Ok([-2.0 * y[0]]),
            0.0,
            [1.0],
            3.0,
            &OdeOptions::default(),
            &mut stats,
            |_, _| {},
        )
        .unwrap();
        assert!((y[0] - (-6.0f64).exp()).abs() < 1e-9);
        assert!(stats.accepted > 0);
    }

    #[test]
    fn harmonic_oscillator_lands_on_endpoint() {
        let mut last_t = 0.0;
        let mut stats = OdeStats::default();
        let y = integrate(
            |_, y: &[f64; 2]| Ok([y[1], -y[0]]),
            0.0,
            [1.0, 0.0],
            10.0,
            &OdeOptions { rtol: 1e-11, atol: 1e-11, ..Default::default() },
            &mut stats,
            |t, _| last_t = t,
        )
        .unwrap();
        assert_eq!(last_t, 10.0);
        assert!((y[0] - 10f64.cos()).abs() < 1e-9);
        assert!((y[1] + 10f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn backward_span_rejected() {
        let mut stats = OdeStats::default();
        let r = integrate(
            |_, y: &[f64; 1]| Ok([y[0]]),
            1.0,
            [1.0],
            0.0,
            &OdeOptions::default(),
            &mut stats,
            |_, _| {},
        );
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn step_budget_exhaustion_reported() {
        let mut stats = OdeStats::default();
        let r = integrate(
            |_, y: &[f64; 2]| Ok([y[1], -y[0]]),
            0.0,
            [1.0, 0.0],
            100.0,
            &OdeOptions { max_steps: 3, ..Default::default() },
            &mut stats,
            |_, _| {},
        );
        assert!(matches!(r, Err(Error::IntegrationFailure { .. })));
    }
}

//! Bracketed scalar root finding: grid scan for sign changes, Brent refinement.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Root {
    pub x: f64,
    pub iterations: usize,
    /// Initial bracket the root was refined from.
    pub bracket: (f64, f64),
}

/// Brent's method on a bracket with `f(a)` and `f(b)` of opposite sign.
///
/// Terminates when the bracket half-width drops below `xtol_abs + xtol_rel * |x|`.
pub fn brent<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    xtol_abs: f64,
    xtol_rel: f64,
    max_iter: usize,
) -> Result<Root> {
    let bracket = (a, b);
    let (mut a, mut b) = (a, b);
    let (mut fa, mut fb) = (f(a), f(b));
    if fa == 0.0 {
        return Ok(Root { x: a, iterations: 0, bracket });
    }
    if fb == 0.0 {
        return Ok(Root { x: b, iterations: 0, bracket });
    }
    if !(fa.is_finite() && fb.is_finite()) || fa.signum() == fb.signum() {
        return Err(Error::NoBracket { lo: a, hi: b });
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for iter in 1..=max_iter {
        if fb.signum() == fc.signum() {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * (xtol_rel * b.abs() + xtol_abs) + 1e-300;
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(Root { x: b, iterations: iter, bracket });
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            // inverse quadratic interpolation, or secant when only two points are distinct
            let s = fb / fa;
            let (mut p, mut q) = if a == c {
                (2.0 * m * s, 1.0 - s)
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                (
                    s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0)),
                    (qa - 1.0) * (r - 1.0) * (s - 1.0),
                )
            };
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        if !fb.is_finite() {
            return Err(Error::NoConvergence(iter));
        }
    }
    Err(Error::NoConvergence(max_iter))
}

/// Logarithmically spaced grid with `n >= 2` points spanning `[lo, hi]`, `0 < lo < hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (l0, l1) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Every root of `f` detected as a sign change (or exact zero) between consecutive grid nodes.
///
/// Non-finite samples break brackets rather than producing spurious roots.
pub fn roots_on_grid<F: FnMut(f64) -> f64>(
    mut f: F,
    grid: &[f64],
    xtol_abs: f64,
    xtol_rel: f64,
) -> Result<Vec<Root>> {
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let mut roots: Vec<Root> = Vec::new();
    for i in 0..grid.len() {
        if values[i] == 0.0 {
            roots.push(Root { x: grid[i], iterations: 0, bracket: (grid[i], grid[i]) });
            continue;
        }
        if i + 1 < grid.len() {
            let (fa, fb) = (values[i], values[i + 1]);
            if fa.is_finite() && fb.is_finite() && fb != 0.0 && fa.signum() != fb.signum() {
                roots.push(brent(&mut f, grid[i], grid[i + 1], xtol_abs, xtol_rel, 200)?);
            }
        }
    }
    Ok(roots)
}

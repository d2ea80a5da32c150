//! Composite Simpson quadrature on uniform grids with grid-halving refinement.

use crate::linalg::{C64, ZERO};
use thiserror::Error;

/// Refinement stops once successive halvings agree to this relative level.
pub const TARGET_RELATIVE: f64 = 1e-8;
/// Results whose last halving moved them by more than this are rejected.
pub const ACCEPT_RELATIVE: f64 = 1e-6;
const MAX_DOUBLINGS: u32 = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadratureError {
    #[error("quadrature not converged: last grid halving changed the result by {relative_change:.3e} (relative)")]
    NotConverged { relative_change: f64 },
}

/// Composite Simpson over `n` (even) intervals.
pub fn simpson<F: Fn(f64) -> C64>(f: F, a: f64, b: f64, n: usize) -> C64 {
    debug_assert!(n >= 2 && n.is_multiple_of(2));
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for m in 1..n {
        let w = if m % 2 == 1 { 4.0 } else { 2.0 };
        acc += f(a + m as f64 * h) * w;
    }
    acc * (h / 3.0)
}

/// Composite Simpson over uniformly spaced samples (odd count).
pub fn simpson_samples(values: &[C64], h: f64) -> C64 {
    let n = values.len() - 1;
    debug_assert!(n >= 2 && n.is_multiple_of(2), "Simpson needs an even interval count");
    let mut acc = values[0] + values[n];
    for (m, v) in values.iter().enumerate().take(n).skip(1) {
        acc += v * if m % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * (h / 3.0)
}

pub fn simpson_samples_real(values: &[f64], h: f64) -> f64 {
    let n = values.len() - 1;
    debug_assert!(n >= 2 && n.is_multiple_of(2), "Simpson needs an even interval count");
    let mut acc = values[0] + values[n];
    for (m, v) in values.iter().enumerate().take(n).skip(1) {
        acc += v * if m % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * (h / 3.0)
}

/// Running integral `∫_{x_0}^{x_m} f` at every sample, fourth-order accurate.
///
/// Even nodes use Simpson panels; odd nodes add the half-panel rule
/// `h (5 f0 + 8 f1 - f2) / 12` to the preceding even node.
pub fn cumulative_simpson(values: &[C64], h: f64) -> Vec<C64> {
    let n = values.len();
    let mut out = vec![ZERO; n];
    if n < 3 {
        if n == 2 {
            out[1] = (values[0] + values[1]) * (h / 2.0);
        }
        return out;
    }
    let mut m = 0;
    while m + 2 < n {
        let (f0, f1, f2) = (values[m], values[m + 1], values[m + 2]);
        out[m + 1] = out[m] + (f0 * 5.0 + f1 * 8.0 - f2) * (h / 12.0);
        out[m + 2] = out[m] + (f0 + f1 * 4.0 + f2) * (h / 3.0);
        m += 2;
    }
    if m + 1 < n {
        // odd number of intervals: close the last one with the mirrored rule
        let (f0, f1, f2) = (values[m - 1], values[m], values[m + 1]);
        out[m + 1] = out[m] + (f2 * 5.0 + f1 * 8.0 - f0) * (h / 12.0);
    }
    out
}

/// Outcome of a refined quadrature.
#[derive(Clone, Debug)]
pub struct Refined<T> {
    pub value: T,
    /// Intervals per piece at the accepted resolution.
    pub intervals: usize,
    pub relative_change: f64,
}

/// Drives grid halving: `eval(n)` returns values and, per value, an absolute
/// scale (typically `∫|integrand|`) at `n` intervals per piece. Doubles `n`
/// until every change is below [`TARGET_RELATIVE`] of its scale.
pub fn refine<F>(n0: usize, mut eval: F) -> Result<Refined<Vec<C64>>, QuadratureError>
where
    F: FnMut(usize) -> (Vec<C64>, Vec<f64>),
{
    let mut n = n0.max(2);
    if n % 2 == 1 {
        n += 1;
    }
    let (mut prev, _) = eval(n);
    let mut change = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        n *= 2;
        let (next, scales) = eval(n);
        change = prev
            .iter()
            .zip(&next)
            .zip(&scales)
            .map(|((a, b), s)| if *s > 0.0 { (a - b).norm() / s } else { 0.0 })
            .fold(0.0, f64::max);
        prev = next;
        if change <= TARGET_RELATIVE {
            break;
        }
    }
    if change > ACCEPT_RELATIVE {
        return Err(QuadratureError::NotConverged {
            relative_change: change,
        });
    }
    Ok(Refined {
        value: prev,
        intervals: n,
        relative_change: change,
    })
}

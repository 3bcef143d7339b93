//! Central finite-difference gradient checking.

use crate::par::{self, Exec};

/// Step used by the loss gradient checks.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Maximum accepted relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for [`relative_error`]. Central differences at
/// `h = 1e-4` on losses of order 1-10 carry about `1e-11` of rounding noise,
/// so gradients below this floor are compared with an absolute bound of
/// `tolerance * RELATIVE_FLOOR` instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat coordinate with the largest relative error.
    pub worst_index: usize,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic[i]` with `(f(x + h e_i) - f(x - h e_i)) / 2h` for each
/// `i` in `indices`.
pub fn check_gradient<F>(x: &[f64], analytic: &[f64], h: f64, indices: &[usize], exec: Exec, f: F) -> GradCheck
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    assert_eq!(x.len(), analytic.len());
    let errs = par::map_range(exec, indices.len(), |n| {
        let i = indices[n];
        let mut probe = x.to_vec();
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        let numeric = (up - down) / (2.0 * h);
        (
            relative_error(analytic[i], numeric),
            (analytic[i] - numeric).abs(),
        )
    });
    let mut out = GradCheck {
        checked: indices.len(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
    };
    for (n, &(rel, abs)) in errs.iter().enumerate() {
        if rel > out.max_rel_err {
            out.max_rel_err = rel;
            out.worst_index = indices[n];
        }
        out.max_abs_err = out.max_abs_err.max(abs);
    }
    out
}

/// All coordinates when `len <= limit`, otherwise `limit` evenly spaced ones.
pub fn sample_indices(len: usize, limit: usize) -> Vec<usize> {
    if len <= limit {
        (0..len).collect()
    } else {
        (0..limit).map(|i| i * len / limit).collect()
    }
}

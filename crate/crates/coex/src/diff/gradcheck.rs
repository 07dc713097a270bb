//! Central finite-difference verification of recorded gradients.
//!
//! This module exists for the test suites: every gradient path in the crate
//! is validated against `(f(θ+h) - f(θ-h)) / 2h` on small instances. It is
//! not used by the learners themselves.

use super::{DiffError, Grads, ParamStore};

/// Worst observed deviation, with the parameter coordinate that produced it.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative deviation with an absolute floor so near-zero gradients compare
/// absolutely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, a.abs().max(b.abs()))
}

/// Compare analytic gradients against central finite differences for every
/// coordinate of every parameter under the given prefixes.
///
/// `loss_fn` must recompute the same scalar loss from the store (fresh tape,
/// fixed noise). `grads` holds the analytic gradients of that loss.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    prefixes: &[&str],
    grads: &Grads,
    step: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamStore) -> Result<f64, DiffError>,
{
    let names: Vec<String> = store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    let mut report = GradCheckReport {
        max_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for name in names {
        let slot = store.slot(&name)?;
        let dims = store.value_at(slot).dim();
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                let original = store.value_at(slot)[(i, j)];
                let mut bumped = store.value_at(slot).clone();
                bumped[(i, j)] = original + step;
                store.set_value(&name, bumped.clone())?;
                let up = loss_fn(store)?;
                bumped[(i, j)] = original - step;
                store.set_value(&name, bumped.clone())?;
                let down = loss_fn(store)?;
                bumped[(i, j)] = original;
                store.set_value(&name, bumped)?;

                let fd = (up - down) / (2.0 * step);
                let analytic = grads.get(slot).map_or(0.0, |g| g[(i, j)]);
                let err = relative_error(analytic, fd);
                report.checked += 1;
                if err > report.max_err {
                    report.max_err = err;
                    report.worst_param = format!("{name}[{i},{j}] analytic={analytic} fd={fd}");
                }
            }
        }
    }
    Ok(report)
}

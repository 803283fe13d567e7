//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the loss value; it never touches
//! the analytic gradient path it is checking.

use super::tape::Gradients;
use super::Parameterized;
use crate::error::Result;

/// Denominator floor for the element-wise relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `loss_fn`'s analytic gradients with central differences over
/// every scalar parameter of `model`. Parameters absent from the analytic
/// gradients are treated as having zero gradient.
pub fn check_gradients<M, F>(model: &mut M, loss_fn: F, step: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: Fn(&M) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = loss_fn(model)?;
    let names: Vec<String> = model.params().iter().map(|p| p.name().to_owned()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        let len = model.params()[pi].value().len();
        for idx in 0..len {
            let original = flat_get(model, pi, idx);
            flat_set(model, pi, idx, original + step);
            let plus = loss_fn(model)?.0;
            flat_set(model, pi, idx, original - step);
            let minus = loss_fn(model)?.0;
            flat_set(model, pi, idx, original);
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic
                .get(name)
                .and_then(|g| g.as_slice().map(|s| s[idx]))
                .unwrap_or(0.0);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

fn flat_get<M: Parameterized>(model: &M, pi: usize, idx: usize) -> f64 {
    model.params()[pi]
        .value()
        .as_slice()
        .expect("standard layout parameter")[idx]
}

fn flat_set<M: Parameterized>(model: &mut M, pi: usize, idx: usize, v: f64) {
    model.params_mut()[pi]
        .value_mut()
        .as_slice_mut()
        .expect("standard layout parameter")[idx] = v;
}

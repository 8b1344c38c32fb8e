//! Central finite-difference checks of reverse-mode gradients.
//!
//! Uses the five-point stencil
//! `(-f(x+2h) + 8 f(x+h) - 8 f(x-h) + f(x-2h)) / 12h`, whose `O(h^4)`
//! truncation error allows a step large enough that f64 rounding in the
//! loss stays far below the tolerance.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Default perturbation.
pub const STEP: f64 = 1e-3;

/// Gradient magnitudes below this are compared on an absolute scale: the
/// finite difference itself carries roughly `1e-16 * |loss| / STEP` of
/// rounding noise, which would swamp a purely relative comparison.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Entry with the largest relative error.
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares the gradient of `loss` with respect to `params` (every stored
/// parameter when `None`) against the five-point difference, entry by entry.
pub fn check_gradients<F>(store: &mut ParamStore, params: Option<&[ParamId]>, h: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };
    let grads = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let original = store.value(id).data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                store.get_mut(id).value.data_mut()[i] = original + offset;
                eval(store)
            };
            let numeric = (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h);
            store.get_mut(id).value.data_mut()[i] = original;

            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some(Mismatch {
                    parameter: store.get(id).name.clone(),
                    index: i,
                    analytic,
                    numeric,
                    relative_error: err,
                });
            }
        }
    }
    Ok(report)
}

//! Central finite-difference checks of tape gradients against stored parameters.

use alloc::string::String;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};

/// Absolute floor in the denominator of the entrywise relative error, so that
/// entries whose true gradient is essentially zero are judged on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Worst entry found by [`check_params`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval(store: &ParamStore, loss: &impl Fn(&mut Tape) -> Var) -> f64 {
    let mut tape = Tape::with_params(store);
    let l = loss(&mut tape);
    tape.value(l).item()
}

/// Compares the analytic gradient of `loss` with central differences of step
/// `h` for every entry of the parameters `ids` (all parameters when empty).
pub fn check_params(store: &ParamStore, ids: &[ParamId], h: f64, loss: impl Fn(&mut Tape) -> Var) -> GradCheck {
    let ids: Vec<ParamId> = if ids.is_empty() { store.ids().collect() } else { ids.to_vec() };
    let grads = {
        let mut tape = Tape::with_params(store);
        let l = loss(&mut tape);
        tape.backward(l)
    };
    let mut work = store.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for id in ids {
        let len = store.get(id).len();
        for k in 0..len {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[k]);
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let up = eval(&work, &loss);
            work.get_mut(id).data_mut()[k] = orig - h;
            let down = eval(&work, &loss);
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = String::from(store.name(id));
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report
}

pub mod suite;

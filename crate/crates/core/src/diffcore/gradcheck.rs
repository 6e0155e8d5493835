use std::fmt::Display;

use super::{ParamId, ParamStore, Tape, Var};

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, element index)` of the worst element.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Set when the function could not be evaluated.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.failure.is_none() && self.max_rel_error < tolerance
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Checks `∂f/∂p` for every element of every parameter in `ids`.
///
/// `f` must build a `1 × 1` output on the supplied tape and be deterministic.
/// The relative error is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F, E>(
    mut f: F,
    store: &mut ParamStore,
    ids: &[ParamId],
    step: f64,
) -> GradCheckReport
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var, E>,
    E: Display,
{
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        failure: None,
    };

    let eval = |store: &ParamStore, f: &mut F| -> Result<f64, String> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store).map_err(|e| e.to_string())?;
        Ok(tape.value(out).data()[0])
    };

    store.zero_grad();
    {
        let mut tape = Tape::new();
        let out = match f(&mut tape, store) {
            Ok(v) => v,
            Err(e) => {
                report.failure = Some(e.to_string());
                return report;
            }
        };
        if let Err(e) = tape.backward_scalar(out, store) {
            report.failure = Some(e.to_string());
            return report;
        }
    }
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).data().to_vec())
        .collect();
    store.zero_grad();

    for (k, &id) in ids.iter().enumerate() {
        for e in 0..store.value(id).len() {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + step;
            let plus = eval(store, &mut f);
            store.value_mut(id).data_mut()[e] = orig - step;
            let minus = eval(store, &mut f);
            store.value_mut(id).data_mut()[e] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(err), _) | (_, Err(err)) => {
                    report.failure = Some(err);
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[k][e];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), e));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}

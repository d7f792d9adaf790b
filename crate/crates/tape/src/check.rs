//! Central finite-difference checks of reverse-mode gradients.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic parameter gradients of `loss` against central differences.
///
/// At most `per_param` entries of each parameter are probed, spread evenly
/// through the matrix. The relative error of an entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn check_params<F>(store: &ParamStore, mut loss: F, step: f64, per_param: usize, floor: f64) -> GradCheckReport
where
    F: FnMut(&ParamStore, &mut Tape) -> Var,
{
    let mut tape = Tape::new();
    let root = loss(store, &mut tape);
    let grads = tape.backward(root);
    let analytic: std::collections::HashMap<ParamId, _> = grads.params(&tape).into_iter().collect();

    let mut work = store.clone();
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    let mut eval = |s: &ParamStore| {
        let mut t = Tape::new();
        let r = loss(s, &mut t);
        t.scalar(r)
    };
    for id in store.ids() {
        let numel = store.value(id).len();
        let probes = per_param.min(numel);
        if probes == 0 {
            continue;
        }
        let stride = (numel / probes).max(1);
        for k in 0..probes {
            let flat = (k * stride + k % stride.max(1)) % numel;
            let orig = store.value(id).as_slice().expect("standard layout")[flat];
            work.value_mut(id).as_slice_mut().unwrap()[flat] = orig + step;
            let plus = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[flat] = orig - step;
            let minus = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[flat] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(&id).map(|g| g.as_slice().unwrap()[flat]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), flat, a, numeric));
                }
            }
        }
    }
    report
}

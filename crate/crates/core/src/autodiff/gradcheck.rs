use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{GaitError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the tape gradient of the scalar `f` against central differences
/// for every coordinate of every parameter in `store`.
///
/// `f` must be deterministic: it is re-evaluated twice per coordinate.
pub fn grad_check<L>(f: L, store: &mut ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_with_fault(f, store, eps, None)
}

/// As [`grad_check`], with the backward rule of `fault` deliberately broken.
pub fn grad_check_with_fault<L>(
    f: L,
    store: &mut ParamStore<f64>,
    eps: f64,
    fault: Option<&str>,
) -> Result<GradCheckReport>
where
    L: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(GaitError::Contract(format!("grad_check: loss shape {:?}", v.shape())));
        }
        Ok(v.data()[0])
    };

    store.zero_grads();
    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_fault(op);
    }
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let analytic = store.grad(id).clone();
        let original = store.value(id).clone();
        for i in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[i] += eps;
            store.set_value(id, plus)?;
            let fp = eval(store)?;
            let mut minus = original.clone();
            minus.data_mut()[i] -= eps;
            store.set_value(id, minus)?;
            let fm = eval(store)?;
            store.set_value(id, original.clone())?;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_param = store.get(id).name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    store.zero_grads();
    Ok(report)
}

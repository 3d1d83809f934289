use crate::error::{Error, Result};

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Real;

/// Denominator floor of the per-coordinate relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn evaluate<T, F>(f: &F, store: &ParamStore<T>) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Shape(format!("checked function returned {:?}", v.shape())));
    }
    let x = v.data()[0].to_f64_lossy();
    if !x.is_finite() {
        return Err(Error::Numeric("checked function produced a non-finite value".into()));
    }
    Ok(x)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate over every parameter
/// in `store`. Parameter values are restored before returning.
pub fn finite_diff_check<T, F>(f: F, store: &mut ParamStore<T>, h: T) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    if h <= T::zero() {
        return Err(Error::Config("finite difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let two_h = (h + h).to_f64_lossy();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for k in 0..store.value(id).len() {
            let original = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = original + h;
            let plus = evaluate(&f, store);
            store.get_mut(id).value.data_mut()[k] = original - h;
            let minus = evaluate(&f, store);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / two_h;
            let analytic = store.grad(id).data()[k].to_f64_lossy();
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

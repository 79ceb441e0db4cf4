use super::{Bindings, ParamSet, Tape, Var};
use crate::error::{NeurankError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over elements of |analytic − numeric| / max(1, |analytic| + |numeric|)
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares tape gradients of `f` with central differences
/// `(f(p+h) − f(p−h)) / 2h` for every element of every trainable tensor.
pub fn grad_check<F>(params: &ParamSet, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(NeurankError::Config(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let out = f(&mut tape, &b)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let bindings = params.bind(&mut tape);
    let loss = f(&mut tape, &bindings)?;
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        checked: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let var = bindings.require(&name)?;
        let analytic = grads.get(var).map(<[f64]>::to_vec);
        let n = params.require(&name)?.numel();
        for idx in 0..n {
            let orig = params.require(&name)?.data()[idx];
            work.get_mut(&name).expect("cloned").data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(&name).expect("cloned").data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_ref().map_or(0.0, |g| g[idx]);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst_param = Some(name.clone());
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

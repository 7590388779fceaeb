use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares tape gradients of every parameter element against central
/// differences `(f(p+ε) − f(p−ε)) / 2ε`.
pub fn gradcheck<F>(f: F, params: &ParamStore<f64>, eps: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    gradcheck_sampled(f, params, eps, tol, usize::MAX)
}

/// Like [`gradcheck`], but probes at most `max_per_param` evenly spaced
/// elements of each parameter.
pub fn gradcheck_sampled<F>(
    f: F,
    params: &ParamStore<f64>,
    eps: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<GradcheckReport>
where
    F: Fn(&Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck closure returned {value}")));
    }
    let analytic = tape.backward(loss)?.for_store(params);
    drop(tape);

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let t = Tape::new();
        let l = f(&t, p)?;
        let v = t.value(l).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("gradcheck closure returned {v}")))
        }
    };

    let mut probe = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for (pi, name) in names.iter().enumerate() {
        let len = params.value_at(pi).len();
        let stride = len.div_ceil(max_per_param.min(len).max(1)).max(1);
        for ei in (0..len).step_by(stride) {
            let orig = params.value_at(pi).data()[ei];
            probe.value_mut_at(pi).data_mut()[ei] = orig + eps;
            let plus = eval(&probe)?;
            probe.value_mut_at(pi).data_mut()[ei] = orig - eps;
            let minus = eval(&probe)?;
            probe.value_mut_at(pi).data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = rel;
                report.worst_param = Some(name.clone());
                report.worst_index = ei;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

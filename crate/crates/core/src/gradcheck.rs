//! Central finite-difference checks of tape gradients.

use crate::model::{forward_on_tape, SambaModel};
use crate::params::{self, ParamSet};
use crate::tape::Tape;
use crate::tensor::{Result, Tensor};

/// One parameter scalar whose analytic and numeric derivatives disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Largest relative error and where it occurred.
    pub worst: f64,
    pub worst_param: String,
    pub mismatches: Vec<Mismatch>,
}

/// `|a − b| / max(|a|, |b|)`, with `floor` guarding derivatives that vanish.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Compares `∂forward(x)/∂θ` for every scalar `θ` of `model` against central
/// differences with step `h`; entries whose relative error exceeds `tol` are
/// reported. `floor` is the magnitude below which errors count as absolute.
pub fn check_model(model: &SambaModel, x: &Tensor, h: f64, tol: f64, floor: f64) -> Result<GradReport> {
    let snap = params::snapshot(&model.params);
    let mut tape = Tape::new();
    let vars = params::bind(&mut tape, &snap);
    let xv = tape.constant(x.clone());
    let out = forward_on_tape(&mut tape, xv, &vars)?;
    let grads = tape.backward(out)?;
    let analytic = params::flat_grads(&tape, &vars, &grads);

    let mut names = Vec::new();
    model.params.visit("", &mut |name, t| {
        names.extend((0..t.len()).map(|i| (name.to_owned(), i)));
    });
    let base = params::flatten(&model.params);
    let mut probe = model.clone();
    let mut report = GradReport::default();
    for (j, (name, index)) in names.into_iter().enumerate() {
        let mut eval = |v: f64| {
            let mut values = base.clone();
            values[j] = v;
            params::assign_flat(&mut probe.params, &values);
            probe.forward(x)
        };
        let plus = eval(base[j] + h)?;
        let minus = eval(base[j] - h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic[j], numeric, floor);
        report.checked += 1;
        if err > report.worst {
            report.worst = err;
            report.worst_param = format!("{name}[{index}]");
        }
        if err > tol {
            report.mismatches.push(Mismatch {
                param: name,
                index,
                analytic: analytic[j],
                numeric,
            });
        }
    }
    Ok(report)
}

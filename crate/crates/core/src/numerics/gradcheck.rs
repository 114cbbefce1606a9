use super::params::ParamStore;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

/// Below this magnitude the comparison falls back to absolute error.
const ABS_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter name and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub pass: bool,
}

/// Wraps a tape-building closure as a value-and-gradient function.
pub fn traced<F>(build: F) -> impl Fn(&ParamStore) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    move |params| {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads))
    }
}

/// Compares analytic gradients from `f` against central differences with step `h`.
///
/// A coordinate's error is `|a − n| / max(|a|, |n|)`, or `|a − n|` when both
/// magnitudes are below 1e-8.
pub fn grad_check<F>(f: F, params: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (first, grads) = f(params)?;
    let (second, _) = f(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coordinates: 0,
        pass: true,
    };
    let mut worst_score = -1.0;
    for (id, p) in params.iter() {
        let analytic = grads.param(id);
        for i in 0..p.value.len() {
            let original = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = original + h;
            let (up, _) = f(&probe)?;
            probe.value_mut(id).data_mut()[i] = original - h;
            let (down, _) = f(&probe)?;
            probe.value_mut(id).data_mut()[i] = original;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let err = if scale < ABS_FALLBACK { abs } else { abs / scale };

            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if scale >= ABS_FALLBACK {
                report.max_rel_error = report.max_rel_error.max(err);
            }
            if err > worst_score {
                worst_score = err;
                report.worst = Some((p.name.clone(), i));
            }
            if !(err <= tol) {
                report.pass = false;
            }
        }
    }
    Ok(report)
}

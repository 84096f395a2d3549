use super::{Tape, Tensor, TensorError, Var};

/// One-sided slopes that disagree by more than this (relative) mark a kink.
const KINK_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of |analytic - central| / max(1, |central|).
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates sitting on (or within one step of) a non-differentiable
    /// point, detected by disagreeing one-sided differences.
    pub skipped: Vec<usize>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let v = f(&tape, tape.param(x))?.item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFiniteValue(v))
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of step `h`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let input = tape.param(x);
    let out = f(&tape, input)?;
    let f0 = out.item();
    if !f0.is_finite() {
        return Err(TensorError::NonFiniteValue(f0));
    }
    let analytic = tape.backward(out)?.wrt(input);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: Vec::new(),
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;

        let forward = (plus - f0) / h;
        let backward = (f0 - minus) / h;
        let scale = 1f64.max(forward.abs()).max(backward.abs());
        if (forward - backward).abs() > KINK_TOLERANCE * scale {
            report.skipped.push(i);
            continue;
        }
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic.data()[i] - central).abs() / 1f64.max(central.abs());
        report.max_rel_error = report.max_rel_error.max(err);
        report.checked += 1;
    }
    Ok(report)
}

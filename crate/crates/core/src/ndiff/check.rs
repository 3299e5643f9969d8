use super::{Array, NdiffError, Tape, Var};

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn central_difference(
    f: &dyn Fn(&Array) -> Result<f64, NdiffError>,
    point: &Array,
    step: f64,
) -> Result<Array, NdiffError> {
    let mut out = Array::zeros(point.rows(), point.cols());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = x - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = x;
        out.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    Ok(out)
}

/// Compares the tape gradient of `build` at `point` against central
/// differences and returns `max_i |analytic - fd| / (|fd| + 1e-12)`.
///
/// `build` records the function on the supplied tape, taking the input node
/// and returning a scalar node.
pub fn grad_check<F>(build: F, point: &Array, step: f64) -> Result<f64, NdiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NdiffError>,
{
    let mut tape = Tape::new();
    let x = tape.var(point.clone());
    let root = build(&mut tape, x)?;
    tape.backward(root)?;
    let analytic = tape.grad(x);

    let eval = |p: &Array| -> Result<f64, NdiffError> {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let r = build(&mut t, x)?;
        Ok(t.value(r).data()[0])
    };
    let fd = central_difference(&eval, point, step)?;
    Ok(analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
        .fold(0.0, f64::max))
}

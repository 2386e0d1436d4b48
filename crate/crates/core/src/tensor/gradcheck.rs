use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all coordinates of
/// `point`, with the numeric gradient from central differences of step `h`.
pub fn grad_check<G>(f: G, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    G: Fn(&mut Tape<'static, f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.variable(point.clone());
    let loss = f(&mut tape, x)?;
    let analytic = tape.backward(loss)?.wrt(&tape, x);

    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.variable(p);
        let l = f(&mut tape, x)?;
        Ok(tape.value(l).get(0, 0))
    };

    let mut worst = 0.0f64;
    for i in 0..point.data().len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric)?);
    }
    Ok(worst)
}

/// Gradient check over every coordinate of the listed parameters of a store.
pub fn grad_check_params<G>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: G,
    h: f64,
) -> Result<f64>
where
    G: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let loss = f(&mut tape)?;
    let analytic = tape.backward(loss)?.param_grads(&tape);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let l = f(&mut tape)?;
        Ok(tape.value(l).get(0, 0))
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for &id in ids {
        for i in 0..store.get(id).data().len() {
            let x0 = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = x0 + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0 - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.get(id).data()[i], numeric)?);
        }
    }
    Ok(worst)
}

fn relative_error(analytic: f64, numeric: f64) -> Result<f64> {
    if !analytic.is_finite() || !numeric.is_finite() {
        return Err(TensorError::NonFinite("grad_check"));
    }
    Ok((analytic - numeric).abs() / analytic.abs().max(1.0))
}

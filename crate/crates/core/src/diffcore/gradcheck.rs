use crate::diffcore::{Bindings, ParamStore, Tape, Tensor, Var};
use crate::error::{AnydError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from leaves holding `point`.
/// Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(AnydError::invalid("finite-difference step must be positive"));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut probe: Vec<Tensor> = point.to_vec();
    let mut worst = 0.0f64;
    for (ti, t) in point.iter().enumerate() {
        let analytic = grads.get(vars[ti]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        for k in 0..t.len() {
            let x0 = t.data()[k];
            probe[ti].data_mut()[k] = x0 + h;
            let up = eval(&probe)?;
            probe[ti].data_mut()[k] = x0 - h;
            let down = eval(&probe)?;
            probe[ti].data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// [`grad_check`] over every parameter of a store.
pub fn grad_check_store<F>(store: &ParamStore, f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Bindings) -> Result<Var>,
{
    let point: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
    grad_check(|tape, vars| f(tape, &Bindings::from_vars(vars.to_vec())), &point, h)
}

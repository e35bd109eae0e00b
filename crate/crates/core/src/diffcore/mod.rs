//! Minimal reverse-mode differentiable numerics in 64-bit floating point.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_store, DEFAULT_STEP};
pub use param::{sgd_step, Bindings, ParamId, ParamStore, Parameter, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

// Value-level entry points; each runs the corresponding tape operation on
// constants and returns the result.

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(x, y)?;
    Ok(tape.value(out).clone())
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.softmax(v, axis)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let g = tape.constant(gain.clone());
    let b = tape.constant(bias.clone());
    let out = tape.layer_norm(v, g, b, eps)?;
    Ok(tape.value(out).clone())
}

pub fn conv2d_3x3(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let k = tape.constant(kernel.clone());
    let b = tape.constant(bias.clone());
    let out = tape.conv2d_3x3(v, k, b)?;
    Ok(tape.value(out).clone())
}

//! Dense matrices, reverse-mode gradients and a central-difference oracle.

mod matrix;
mod tape;

pub use matrix::{argmax, cosine_similarity_matrix, row_softmax, Matrix, NORM_EPS};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Default step for [`finite_difference_gradient`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Value of a scalar objective together with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub gradient: Matrix,
}

/// Evaluates `objective` at `params` and differentiates it by reverse accumulation.
///
/// The closure receives a fresh tape and the parameter node and must return a
/// 1×1 node built from tape primitives.
pub fn value_and_gradient<F>(objective: F, params: &Matrix) -> Result<GradientResult>
where
    F: Fn(&Tape, Var) -> Var,
{
    let tape = Tape::new();
    let p = tape.param(params.clone());
    let out = objective(&tape, p);
    let value = tape.scalar(out)?;
    let gradient = tape.gradient(out, p)?;
    Ok(GradientResult { value, gradient })
}

/// Forward-only evaluation of a tape objective.
pub fn evaluate<F>(objective: F, params: &Matrix) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Var,
{
    let tape = Tape::new();
    let p = tape.param(params.clone());
    let out = objective(&tape, p);
    tape.scalar(out)
}

/// Central-difference estimate `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(mut objective: F, params: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut x = params.clone();
    let mut grad = Matrix::zeros(params.rows(), params.cols());
    for i in 0..params.data().len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let plus = objective(&x)?;
        x.data_mut()[i] = orig - h;
        let minus = objective(&x)?;
        x.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric {
                primitive: "finite_difference",
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    if scale < 1e-12 {
        return 0.0;
    }
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order (define-by-run); [`Tape::backward`] walks the record in exact
//! reverse order and accumulates gradients into every tensor that requires
//! them. All arithmetic is 64-bit so that gradients can be verified against
//! central finite differences with [`grad_check`].

mod checkpoint;
mod tape;
mod tensor;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, write_manifest, Checkpoint, CheckpointError,
};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },
    #[error("{op}: index {index} out of range for shape {shape:?}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

/// Default step for central finite differences.
pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Verifies the analytic gradients of a scalar function against central
/// finite differences, `(f(p+eps) - f(p-eps)) / (2 eps)` per coordinate.
///
/// `build` receives a fresh tape plus one id per entry of `params` (in
/// order) and must return the scalar loss id. Only parameters with
/// `requires_grad` set are checked. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(mut build: F, params: &mut [Tensor], eps: f64) -> Result<f64, AutodiffError>
where
    F: FnMut(&mut Tape, &[TensorId]) -> Result<TensorId, AutodiffError>,
{
    assert!(eps > 0.0, "grad_check: eps must be positive");

    let eval = |build: &mut F, params: &[Tensor]| -> Result<(Tape, TensorId), AutodiffError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params
            .iter()
            .map(|p| tape.push_tensor(p))
            .collect::<Result<_, _>>()?;
        let loss = build(&mut tape, &ids)?;
        let value = tape.scalar_value(loss, "grad_check")?;
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite {
                what: "grad_check objective".to_string(),
            });
        }
        Ok((tape, loss))
    };

    // Analytic gradients from one recorded pass.
    let (mut tape, loss) = eval(&mut build, params)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = {
        let ids: Vec<TensorId> = (0..params.len()).map(TensorId).collect();
        ids.iter().map(|&id| tape.grad(id).to_vec()).collect()
    };

    let mut max_rel = 0.0f64;
    for p in 0..params.len() {
        if !params[p].requires_grad {
            continue;
        }
        for j in 0..params[p].data.len() {
            let orig = params[p].data[j];
            params[p].data[j] = orig + eps;
            let (tape_plus, loss_plus) = eval(&mut build, params)?;
            let fp = tape_plus.data(loss_plus)[0];
            params[p].data[j] = orig - eps;
            let (tape_minus, loss_minus) = eval(&mut build, params)?;
            let fm = tape_minus.data(loss_minus)[0];
            params[p].data[j] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[p][j];
            let rel = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

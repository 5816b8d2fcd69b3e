use rand::Rng;

use super::AutodiffError;

/// A dense n-dimensional array of 64-bit floats in row-major order.
///
/// This is the host-side value type: model parameters live in `Tensor`s
/// between passes, get registered on a [`super::Tape`] for each forward
/// pass, and receive gradient updates afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated by pulling gradients off a tape; same shape as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Self, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad,
            grad: None,
        }
    }

    pub fn scalar(value: f64, requires_grad: bool) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad,
            grad: None,
        }
    }

    /// Uniform init in `[-bound, bound]`, trainable.
    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Adds `g` into the gradient buffer, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// NaN or Inf anywhere (data or grad) is a checkable failure.
    pub fn check_finite(&self, what: &str) -> Result<(), AutodiffError> {
        let all = self.data.iter().chain(self.grad.iter().flatten());
        for v in all {
            if !v.is_finite() {
                return Err(AutodiffError::NonFinite {
                    what: what.to_string(),
                });
            }
        }
        Ok(())
    }
}

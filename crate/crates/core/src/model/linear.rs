use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_nt, matmul_tn, Matrix, SeededRng};

/// Affine map `y = x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearGrads {
    pub fn zeros_like(layer: &Linear) -> Self {
        Self {
            weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
            bias: Matrix::zeros(1, layer.bias.cols()),
        }
    }

    pub fn accumulate(&mut self, other: &LinearGrads) -> Result<()> {
        self.weight.axpy(1.0, &other.weight)?;
        self.bias.axpy(1.0, &other.bias)
    }
}

impl Linear {
    /// Uniform in `±1/√fan_in` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: rng.uniform_matrix(input, output, -bound, bound),
            bias: rng.uniform_matrix(1, output, -bound, bound),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = matmul(x, &self.weight)?;
        let b = self.bias.row(0);
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(out)
    }

    /// Parameter gradients and, when asked, the gradient with respect to `x`.
    pub fn backward(
        &self,
        x: &Matrix,
        grad_out: &Matrix,
        need_input: bool,
    ) -> Result<(LinearGrads, Option<Matrix>)> {
        if grad_out.shape() != (x.rows(), self.output_width()) {
            return Err(Error::ShapeError {
                op: "linear_backward",
                lhs: grad_out.shape(),
                rhs: (x.rows(), self.output_width()),
            });
        }
        let weight = matmul_tn(x, grad_out)?;
        let mut bias = Matrix::zeros(1, grad_out.cols());
        for r in 0..grad_out.rows() {
            for (b, g) in bias.row_mut(0).iter_mut().zip(grad_out.row(r)) {
                *b += g;
            }
        }
        let grad_x = if need_input {
            Some(matmul_nt(grad_out, &self.weight)?)
        } else {
            None
        };
        Ok((LinearGrads { weight, bias }, grad_x))
    }
}

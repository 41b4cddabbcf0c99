//! Adam optimizer state for one parameter tensor.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shape: &[usize], lr: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// One Adam step with bias correction, applied in place to `param`.
    pub fn step(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::ShapeMismatch(format!(
                "adam_step: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.m.shape()
            )));
        }
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::ONE;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for ((p, &g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(self.m.data_mut().iter_mut().zip(self.v.data_mut()))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }

    /// Adam step restricted to the first `rows` rows of `param`; `grad` has
    /// exactly `rows` rows. Moment entries outside the prefix are untouched,
    /// so parameters beyond the active rank stay bitwise constant.
    pub fn step_rows(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, rows: usize) -> Result<()> {
        if grad.rows() != rows || grad.cols() != param.cols() || rows > param.rows() {
            return Err(Error::ShapeMismatch(format!(
                "adam step_rows: param {:?}, grad {:?}, rows {rows}",
                param.shape(),
                grad.shape()
            )));
        }
        self.t += 1;
        let cols = param.cols();
        self.step_span(param, grad, rows * cols, |i| i)
    }

    /// Adam step restricted to the first `cols` columns of `param`; `grad`
    /// has shape rows x cols.
    pub fn step_cols(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, cols: usize) -> Result<()> {
        if grad.cols() != cols || grad.rows() != param.rows() || cols > param.cols() {
            return Err(Error::ShapeMismatch(format!(
                "adam step_cols: param {:?}, grad {:?}, cols {cols}",
                param.shape(),
                grad.shape()
            )));
        }
        self.t += 1;
        let stride = param.cols();
        let n = grad.len();
        self.step_span(param, grad, n, |i| (i / cols) * stride + (i % cols))
    }

    fn step_span(
        &mut self,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        n: usize,
        index: impl Fn(usize) -> usize,
    ) -> Result<()> {
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::ONE;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for i in 0..n {
            let idx = index(i);
            let g = grad.data()[i];
            let m = &mut self.m.data_mut()[idx];
            *m = b1 * *m + (one - b1) * g;
            let mhat = *m / bc1;
            let v = &mut self.v.data_mut()[idx];
            *v = b2 * *v + (one - b2) * g * g;
            let vhat = *v / bc2;
            param.data_mut()[idx] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

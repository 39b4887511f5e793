use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use super::{join, Param, Params, Real};

/// `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    /// Xavier-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), || {
            T::lit(rng.random_range(-limit..limit))
        });
        Self { weight: Param::new(weight), bias: Param::zeros(1, fan_out) }
    }

    pub fn with_std<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self { weight: Param::normal(fan_in, fan_out, std, rng), bias: Param::zeros(1, fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.value);
        y += &self.bias.value.row(0);
        y
    }

    /// Accumulates weight and bias gradients; returns `dL/dx`.
    pub fn backward(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) -> Array2<T> {
        self.accumulate(x, dy);
        dy.dot(&self.weight.value.t())
    }

    /// Parameter gradients only, for layers whose input is data.
    pub fn accumulate(&mut self, x: ArrayView2<T>, dy: ArrayView2<T>) {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut self.weight.grad);
        let db = dy.sum_axis(Axis(0));
        let mut bias_grad = self.bias.grad.row_mut(0);
        bias_grad += &db;
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

//! Trainable building blocks with explicit forward and backward passes.
//!
//! Every layer follows the same contract: `forward` returns its output plus
//! a cache holding whatever the backward pass needs, and `backward` consumes
//! the upstream gradient, accumulates parameter gradients into
//! [`Param::grad`] and returns the gradient with respect to its input.
//!
//! Activations are laid out as token matrices of shape `(batch * seq, dim)`.
//! Layers are generic over [`Real`] so the same code trains in `f32` and is
//! checked against finite differences in `f64`.

mod attention;
mod block;
mod linear;
mod norm;
pub mod posenc;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use attention::{AttentionCache, SelfAttention};
pub use block::{BlockCache, TransformerBlock};
pub use linear::Linear;
pub use norm::{LayerNorm, LayerNormCache};

/// Floating point element type for parameters and activations.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Checkpoint dtype tag.
    const DTYPE_TAG: u8;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const DTYPE_TAG: u8 = 0;
}

/// Sum with eight independent accumulators.
pub(crate) fn lane_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    chunks.remainder().iter().copied().fold(acc.iter().copied().sum(), |a, b| a + b)
}

/// Dot product with eight independent accumulators.
pub(crate) fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ca.remainder().iter().zip(cb.remainder()).fold(acc.iter().copied().sum(), |s, (&x, &y)| s + x * y)
}

impl Real for f64 {
    const DTYPE_TAG: u8 = 1;
}

/// A trainable tensor with its gradient accumulator and adaptive-moment state.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Array2<T>,
    pub grad: Array2<T>,
    pub m: Array2<T>,
    pub v: Array2<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Array2<T>) -> Self {
        let dim = value.raw_dim();
        Self {
            value,
            grad: Array2::zeros(dim),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Array2::zeros((rows, cols)))
    }

    pub fn filled(rows: usize, cols: usize, x: T) -> Self {
        Self::new(Array2::from_elem((rows, cols), x))
    }

    pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self::new(Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(rng))))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Named traversal of the parameters owned by a layer or model.
///
/// Names are dot-separated and stable; they double as checkpoint keys.
pub trait Params<T: Real> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>);

    fn params(&self, prefix: &str) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        self.collect(prefix, &mut out);
        out
    }

    fn params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        self.collect_mut(prefix, &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut("") {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params("").iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-approximated GELU, evaluated as `x * sigmoid(2u)` since `0.5 (1 + tanh u) = sigmoid(2u)`.
pub fn gelu<T: Real>(x: &Array2<T>) -> Array2<T> {
    let c2 = T::lit(-2.0 * GELU_C);
    let k = T::lit(0.044715);
    x.mapv(|v| v / (T::one() + (c2 * (v + k * v * v * v)).exp()))
}

/// Multiplies `grad` in place by GELU'(pre).
pub fn gelu_backward<T: Real>(pre: &Array2<T>, grad: &mut Array2<T>) {
    let c = T::lit(GELU_C);
    let c2 = T::lit(-2.0 * GELU_C);
    let k = T::lit(0.044715);
    let k3 = T::lit(3.0 * 0.044715);
    let two = T::lit(2.0);
    ndarray::Zip::from(grad).and(pre).for_each(|g, &v| {
        let s = T::one() / (T::one() + (c2 * (v + k * v * v * v)).exp());
        let d = s + two * v * s * (T::one() - s) * c * (T::one() + k3 * v * v);
        *g *= d;
    });
}

pub(crate) fn all_finite<T: Real>(a: &Array2<T>) -> bool {
    a.iter().all(|v| v.is_finite())
}

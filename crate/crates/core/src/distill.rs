//! Layer-wise adaptive self-distillation.
//!
//! Each layer `l` gets an alignment penalty `alpha_l`, the mean tokenwise cosine
//! distance between student and teacher features. Layer weights combine a
//! depth prior `l / L` with `exp(beta * alpha_l)` and are normalized to sum to
//! one; the loss is `sum_l w_l * alpha_l`. Weights are computed from detached
//! penalties, so the gradient is a fixed convex combination of the per-layer
//! cosine-distance gradients.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

pub use crate::config::DistillStrategy;
use crate::encoder::LayerFeatureStack;
use crate::error::{Error, Result};
use crate::nn::Real;

/// Guard for zero-norm tokens in cosine denominators.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub base: Vec<f64>,
    pub penalties: Vec<f64>,
    pub beta: f64,
    pub weights: Vec<f64>,
}

fn check_pair<T>(student: &ArrayView2<T>, teacher: &ArrayView2<T>) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape())));
    }
    if student.nrows() == 0 {
        return Err(Error::Shape("no tokens".into()));
    }
    Ok(())
}

fn norm<T: Real>(v: ndarray::ArrayView1<T>) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Mean over tokens (rows) of `1 - cos(student, teacher)`, in `[0, 2]`.
pub fn alignment_penalty<T: Real>(student: ArrayView2<T>, teacher: ArrayView2<T>) -> Result<T> {
    check_pair(&student, &teacher)?;
    let eps = T::lit(COSINE_EPS);
    let total: T = student
        .rows()
        .into_iter()
        .zip(teacher.rows())
        .map(|(u, v)| {
            if u == v && norm(u) > T::zero() {
                return T::zero();
            }
            let dot = u.dot(&v);
            (T::one() - dot / (norm(u) * norm(v)).max(eps)).max(T::zero()).min(T::lit(2.0))
        })
        .sum();
    Ok(total / T::from_usize(student.nrows()).unwrap())
}

/// Penalty plus `scale * d(penalty)/d(student)`.
pub fn alignment_penalty_grad<T: Real>(student: ArrayView2<T>, teacher: ArrayView2<T>, scale: T) -> Result<(T, Array2<T>)> {
    check_pair(&student, &teacher)?;
    let eps = T::lit(COSINE_EPS);
    let n = T::from_usize(student.nrows()).unwrap();
    let mut grad = Array2::zeros(student.raw_dim());
    let mut total = T::zero();
    Zip::from(grad.rows_mut()).and(student.rows()).and(teacher.rows()).for_each(|mut g, u, v| {
        let (nu, nv) = (norm(u), norm(v));
        let dot = u.dot(&v);
        let denom = nu * nv;
        if denom <= eps {
            // guarded branch: cos = dot / eps
            total += T::one() - dot / eps;
            Zip::from(&mut g).and(&v).for_each(|gi, &vi| *gi = -scale * vi / (eps * n));
            return;
        }
        if u == v {
            // cosine distance is stationary at the teacher; keep the zero exact
            return;
        }
        let cos = dot / denom;
        total += (T::one() - cos).max(T::zero()).min(T::lit(2.0));
        // d(1 - cos)/du = -(v / (|u||v|) - cos * u / |u|^2)
        let a = scale / (denom * n);
        let b = scale * cos / (nu * nu * n);
        Zip::from(&mut g).and(&u).and(&v).for_each(|gi, &ui, &vi| *gi = b * ui - a * vi);
    });
    Ok((total / n, grad))
}

/// Depth prior `l / L` for `l = 1..=L`.
pub fn base_weights(layers: usize) -> Vec<f64> {
    (1..=layers).map(|l| l as f64 / layers as f64).collect()
}

/// `w_l = base_l exp(beta alpha_l) / sum_k base_k exp(beta alpha_k)`.
pub fn adaptive_weights(penalties: &[f64], beta: f64) -> Result<AdaptiveWeights> {
    if penalties.is_empty() {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    if !beta.is_finite() || penalties.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("distillation penalties or beta".into()));
    }
    let base = base_weights(penalties.len());
    // subtracting the max exponent leaves the ratio unchanged
    let shift = penalties.iter().map(|a| beta * a).fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = base.iter().zip(penalties).map(|(b, a)| b * (beta * a - shift).exp()).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|r| r / total).collect();
    Ok(AdaptiveWeights { base, penalties: penalties.to_vec(), beta, weights })
}

/// Layer weights for any of the four strategies.
pub fn strategy_weights(penalties: &[f64], strategy: DistillStrategy, beta: f64) -> Result<AdaptiveWeights> {
    let l = penalties.len();
    match strategy {
        DistillStrategy::Adaptive => adaptive_weights(penalties, beta),
        DistillStrategy::Progressive => adaptive_weights(penalties, 0.0),
        DistillStrategy::Uniform | DistillStrategy::FinalLayer => {
            let mut w = adaptive_weights(penalties, 0.0)?;
            w.beta = 0.0;
            w.weights = match strategy {
                DistillStrategy::Uniform => vec![1.0 / l as f64; l],
                _ => (0..l).map(|i| if i + 1 == l { 1.0 } else { 0.0 }).collect(),
            };
            Ok(w)
        }
    }
}

fn check_stacks<T: Real>(student: &LayerFeatureStack<T>, teacher: &LayerFeatureStack<T>) -> Result<()> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::Shape(format!("student has {} layers, teacher {}", student.len(), teacher.len())));
    }
    Ok(())
}

pub fn layer_penalties<T: Real>(student: &LayerFeatureStack<T>, teacher: &LayerFeatureStack<T>) -> Result<Vec<f64>> {
    check_stacks(student, teacher)?;
    student
        .per_layer
        .iter()
        .zip(&teacher.per_layer)
        .map(|(s, t)| alignment_penalty(s.view(), t.view()).map(Real::as_f64))
        .collect()
}

/// Adaptive distillation loss `sum_l w_l alpha_l` and the weights used.
pub fn distillation_loss<T: Real>(student: &LayerFeatureStack<T>, teacher: &LayerFeatureStack<T>, beta: f64) -> Result<(T, AdaptiveWeights)> {
    strategy_loss(student, teacher, DistillStrategy::Adaptive, beta)
}

pub fn strategy_loss<T: Real>(
    student: &LayerFeatureStack<T>,
    teacher: &LayerFeatureStack<T>,
    strategy: DistillStrategy,
    beta: f64,
) -> Result<(T, AdaptiveWeights)> {
    let penalties = layer_penalties(student, teacher)?;
    let w = strategy_weights(&penalties, strategy, beta)?;
    let loss = w.weights.iter().zip(&penalties).map(|(w, a)| w * a).sum::<f64>();
    Ok((T::lit(loss), w))
}

/// Loss value for one ablation mode (final-layer, uniform, progressive or adaptive).
pub fn strategy_variant<T: Real>(
    student: &LayerFeatureStack<T>,
    teacher: &LayerFeatureStack<T>,
    strategy: DistillStrategy,
    beta: f64,
) -> Result<T> {
    strategy_loss(student, teacher, strategy, beta).map(|(l, _)| l)
}

/// Loss, weights and `scale * dL/d(student layer)` for every layer.
pub fn distillation_grad<T: Real>(
    student: &LayerFeatureStack<T>,
    teacher: &LayerFeatureStack<T>,
    strategy: DistillStrategy,
    beta: f64,
    scale: T,
) -> Result<(T, AdaptiveWeights, Vec<Array2<T>>)> {
    let penalties = layer_penalties(student, teacher)?;
    let w = strategy_weights(&penalties, strategy, beta)?;
    let mut grads = Vec::with_capacity(w.weights.len());
    for ((s, t), &wl) in student.per_layer.iter().zip(&teacher.per_layer).zip(&w.weights) {
        let (_, g) = alignment_penalty_grad(s.view(), t.view(), scale * T::lit(wl))?;
        grads.push(g);
    }
    let loss = w.weights.iter().zip(&penalties).map(|(w, a)| w * a).sum::<f64>();
    Ok((T::lit(loss), w, grads))
}

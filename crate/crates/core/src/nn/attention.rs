use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::{join, lane_dot, lane_sum, Linear, Param, Params, Real};

/// Multi-head self-attention over each image's token sequence (no masking).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention<T> {
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    input: Array2<T>,
    qkv: Array2<T>,
    /// `(batch * heads, seq, seq)` row-softmaxed scores.
    probs: Array3<T>,
    ctx: Array2<T>,
    seq: usize,
}

impl<T: Real> SelfAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self { qkv: Linear::new(dim, 3 * dim, rng), proj: Linear::new(dim, dim, rng), heads }
    }

    fn dim(&self) -> usize {
        self.proj.fan_in()
    }

    pub fn forward(&self, x: Array2<T>, seq: usize) -> (Array2<T>, AttentionCache<T>) {
        let dim = self.dim();
        let dh = dim / self.heads;
        let batch = x.nrows() / seq;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qkv = self.qkv.forward(x.view());
        let mut probs = Array3::zeros((batch * self.heads, seq, seq));
        let mut ctx = Array2::zeros((x.nrows(), dim));
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let c = h * dh..(h + 1) * dh;
                let q = qkv.slice(s![rows.clone(), c.clone()]);
                let k = qkv.slice(s![rows.clone(), dim + c.start..dim + c.end]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + c.start..2 * dim + c.end]);
                let mut p = probs.index_axis_mut(Axis(0), b * self.heads + h);
                general_mat_mul(scale, &q, &k.t(), T::zero(), &mut p);
                softmax_rows(&mut p);
                let mut out = ctx.slice_mut(s![rows.clone(), c]);
                general_mat_mul(T::one(), &p, &v, T::zero(), &mut out);
            }
        }
        let y = self.proj.forward(ctx.view());
        (y, AttentionCache { input: x, qkv, probs, ctx, seq })
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let dim = self.dim();
        let dh = dim / self.heads;
        let seq = cache.seq;
        let batch = cache.input.nrows() / seq;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let dctx = self.proj.backward(cache.ctx.view(), dy);
        let qkv = &cache.qkv;
        let mut dqkv = Array2::zeros(qkv.raw_dim());
        let mut dp = Array2::zeros((seq, seq));
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let c = h * dh..(h + 1) * dh;
                let kc = dim + c.start..dim + c.end;
                let vc = 2 * dim + c.start..2 * dim + c.end;
                let p = cache.probs.index_axis(Axis(0), b * self.heads + h);
                let d_out = dctx.slice(s![rows.clone(), c.clone()]);
                let q = qkv.slice(s![rows.clone(), c.clone()]);
                let k = qkv.slice(s![rows.clone(), kc.clone()]);
                let v = qkv.slice(s![rows.clone(), vc.clone()]);
                general_mat_mul(T::one(), &p.t(), &d_out, T::zero(), &mut dqkv.slice_mut(s![rows.clone(), vc]));
                general_mat_mul(T::one(), &d_out, &v.t(), T::zero(), &mut dp);
                // softmax Jacobian: dS = P * (dP - rowsum(dP * P))
                let probs = p.as_slice().expect("contiguous scores").chunks_exact(seq);
                for (g, pr) in dp.as_slice_mut().expect("contiguous").chunks_exact_mut(seq).zip(probs) {
                    let dot = lane_dot(g, pr);
                    g.iter_mut().zip(pr).for_each(|(gi, &pi)| *gi = pi * (*gi - dot) * scale);
                }
                general_mat_mul(T::one(), &dp, &k, T::zero(), &mut dqkv.slice_mut(s![rows.clone(), c]));
                general_mat_mul(T::one(), &dp.t(), &q, T::zero(), &mut dqkv.slice_mut(s![rows.clone(), kc]));
            }
        }
        self.qkv.backward(cache.input.view(), dqkv.view())
    }
}

fn softmax_rows<T: Real>(m: &mut ndarray::ArrayViewMut2<T>) {
    for mut row in m.rows_mut() {
        let row = row.as_slice_mut().expect("contiguous scores");
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let inv = T::one() / lane_sum(row);
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<T: Real> Params<T> for SelfAttention<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.qkv.collect(&join(prefix, "qkv"), out);
        self.proj.collect(&join(prefix, "proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.qkv.collect_mut(&join(prefix, "qkv"), out);
        self.proj.collect_mut(&join(prefix, "proj"), out);
    }
}

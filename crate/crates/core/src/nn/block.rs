use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::{gelu, gelu_backward, join, AttentionCache, LayerNorm, LayerNormCache, Linear, Param, Params, Real, SelfAttention};

/// Pre-norm transformer block: `x + attn(ln(x))` then `x + ffn(ln(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T> {
    pub norm_attn: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub norm_ffn: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    ffn_in: Array2<T>,
    hidden_pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let hidden = dim * mlp_ratio;
        Self {
            norm_attn: LayerNorm::new(dim),
            attn: SelfAttention::new(dim, heads, rng),
            norm_ffn: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<T>, seq: usize) -> (Array2<T>, BlockCache<T>) {
        let (a_in, ln1) = self.norm_attn.forward(x.view());
        let (a_out, attn) = self.attn.forward(a_in, seq);
        let x1 = x + &a_out;
        let (ffn_in, ln2) = self.norm_ffn.forward(x1.view());
        let hidden_pre = self.fc1.forward(ffn_in.view());
        let hidden = gelu(&hidden_pre);
        let y = x1 + self.fc2.forward(hidden.view());
        (y, BlockCache { ln1, attn, ln2, ffn_in, hidden_pre, hidden })
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let mut dh = self.fc2.backward(cache.hidden.view(), dy);
        gelu_backward(&cache.hidden_pre, &mut dh);
        let d_ffn_in = self.fc1.backward(cache.ffn_in.view(), dh.view());
        let mut dx1 = self.norm_ffn.backward(&cache.ln2, d_ffn_in.view());
        dx1 += &dy;
        let d_a_in = self.attn.backward(&cache.attn, dx1.view());
        let mut dx = self.norm_attn.backward(&cache.ln1, d_a_in.view());
        dx += &dx1;
        dx
    }
}

impl<T: Real> Params<T> for TransformerBlock<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.norm_attn.collect(&join(prefix, "norm.pre_attn"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        self.norm_ffn.collect(&join(prefix, "norm.pre_ffn"), out);
        self.fc1.collect(&join(prefix, "ffn.fc1"), out);
        self.fc2.collect(&join(prefix, "ffn.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.norm_attn.collect_mut(&join(prefix, "norm.pre_attn"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        self.norm_ffn.collect_mut(&join(prefix, "norm.pre_ffn"), out);
        self.fc1.collect_mut(&join(prefix, "ffn.fc1"), out);
        self.fc2.collect_mut(&join(prefix, "ffn.fc2"), out);
    }
}

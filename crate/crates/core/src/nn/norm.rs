use ndarray::{Array1, Array2, ArrayView2};

use super::{join, lane_dot, lane_sum, Param, Params, Real};

const LN_EPS: f64 = 1e-6;

/// Layer normalization over the feature axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Param::filled(1, dim, T::one()), beta: Param::zeros(1, dim) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = x.ncols();
        let n = T::from_usize(d).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = x.as_standard_layout().into_owned();
        let mut y = Array2::zeros(xhat.raw_dim());
        let mut rstd = Array1::zeros(x.nrows());
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let beta = self.beta.value.as_slice().expect("contiguous");
        let rows = xhat.as_slice_mut().expect("standard layout").chunks_exact_mut(d);
        let outs = y.as_slice_mut().expect("standard layout").chunks_exact_mut(d);
        for ((xr, yr), r) in rows.zip(outs).zip(rstd.iter_mut()) {
            let mean = lane_sum(xr) / n;
            xr.iter_mut().for_each(|v| *v -= mean);
            let s = T::one() / (lane_dot(xr, xr) / n + eps).sqrt();
            for (((v, o), &g), &b) in xr.iter_mut().zip(yr.iter_mut()).zip(gamma).zip(beta) {
                *v *= s;
                *o = *v * g + b;
            }
            *r = s;
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: ArrayView2<T>) -> Array2<T> {
        let d = dy.ncols();
        let n = T::from_usize(d).unwrap();
        let dy = dy.as_standard_layout();
        let mut dx = Array2::zeros(dy.raw_dim());
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let dg = self.gamma.grad.as_slice_mut().expect("contiguous");
        let db = self.beta.grad.as_slice_mut().expect("contiguous");
        let mut g = vec![T::zero(); d];
        let rows = dy.as_slice().expect("standard layout").chunks_exact(d);
        let xhats = cache.xhat.as_slice().expect("standard layout").chunks_exact(d);
        let outs = dx.as_slice_mut().expect("standard layout").chunks_exact_mut(d);
        for (((dyr, xh), out), &s) in rows.zip(xhats).zip(outs).zip(&cache.rstd) {
            for j in 0..d {
                dg[j] += dyr[j] * xh[j];
                db[j] += dyr[j];
                g[j] = dyr[j] * gamma[j];
            }
            let mean_g = lane_sum(&g) / n;
            let mean_gx = lane_dot(&g, xh) / n;
            for j in 0..d {
                out[j] = s * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
    }
}

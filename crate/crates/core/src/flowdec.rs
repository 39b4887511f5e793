//! Patch-wise pixel flow decoder.
//!
//! The latent grid is lifted to decoder width, given fixed 2D position
//! embeddings and passed through `K` global transformer blocks to produce one
//! condition token per patch. A small residual MLP then predicts, for each
//! patch independently, the rectified-flow velocity `eps - x` from the noisy
//! patch, the timestep and that patch's condition token.
//!
//! Convention: data sits at `t = 0` and noise at `t = 1`, so
//! `x_t = (1 - t) x + t eps` and sampling integrates from `t = 1` down to `t = 0`.

use ndarray::{concatenate, s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DecoderMode, RunConfig, TimestepDistribution};
use crate::data::ImageBatch;
use crate::encoder::LatentCode;
use crate::error::{Error, Result};
use crate::nn::{all_finite, gelu, gelu_backward, join, posenc, BlockCache, LayerNorm, LayerNormCache, Linear, Param, Params, Real, TransformerBlock};

/// Width of the sinusoidal timestep embedding fed to the velocity head.
pub const TIME_EMBED_DIM: usize = 32;

/// `(batch, 3, H, W)` to `(batch * S, p * p * 3)`; each row is one patch in
/// `(row, col, channel)` order, patches in row-major grid order.
pub fn patchify<T: Real>(images: ArrayView4<f32>, p: usize) -> Result<Array2<T>> {
    let (b, c, h, w) = images.dim();
    if p == 0 || h % p != 0 || w % p != 0 || c != 3 {
        return Err(Error::Shape(format!("cannot split {h}x{w}x{c} images into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((b * gh * gw, p * p * 3));
    for n in 0..b {
        for i in 0..gh {
            for j in 0..gw {
                let mut row = out.row_mut((n * gh + i) * gw + j);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..3 {
                            row[k] = T::from_f32(images[[n, ch, i * p + y, j * p + x]]).unwrap();
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: ArrayView2<T>, batch: usize, h: usize, w: usize, p: usize) -> Result<Array4<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || patches.nrows() != batch * (h / p) * (w / p) || patches.ncols() != p * p * 3 {
        return Err(Error::Shape(format!("cannot assemble {:?} patches into {batch} images of {h}x{w}", patches.shape())));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Array4::zeros((batch, 3, h, w));
    for n in 0..batch {
        for i in 0..gh {
            for j in 0..gw {
                let row = patches.row((n * gh + i) * gw + j);
                let mut k = 0;
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..3 {
                            out[[n, ch, i * p + y, j * p + x]] = row[k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One condition token per patch, `(batch * grid * grid, decoder_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens<T> {
    pub c: Array2<T>,
    pub batch: usize,
    pub grid: usize,
}

impl<T: Real> ConditionTokens<T> {
    pub fn seq(&self) -> usize {
        self.grid * self.grid
    }

    /// Image `i` of the result takes the conditions of image `perm[i]`.
    pub fn permute_images(&self, perm: &[usize]) -> Self {
        let seq = self.seq();
        let idx: Vec<usize> = perm.iter().flat_map(|&src| src * seq..(src + 1) * seq).collect();
        Self { c: self.c.select(Axis(0), &idx), batch: perm.len(), grid: self.grid }
    }
}

/// Per-image timesteps and per-patch Gaussian noise for one flow-matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNoise<T> {
    pub eps: Array2<T>,
    pub t: Vec<T>,
}

impl<T: Real> FlowNoise<T> {
    /// Draws `eps ~ N(0, I)` independently for every patch element and one `t ~ p_t` per image.
    pub fn sample<R: Rng + ?Sized>(batch: usize, seq: usize, patch_dim: usize, dist: TimestepDistribution, rng: &mut R) -> Self {
        let t = sample_timesteps(batch, dist, rng).into_iter().map(T::lit).collect();
        let eps = Array2::from_shape_simple_fn((batch * seq, patch_dim), || T::lit(StandardNormal.sample(rng)));
        Self { eps, t }
    }

    /// The per-image timesteps repeated for every patch row.
    pub fn t_rows(&self, seq: usize) -> Vec<T> {
        self.t.iter().flat_map(|&t| std::iter::repeat_n(t, seq)).collect()
    }
}

pub fn sample_timesteps<R: Rng + ?Sized>(n: usize, dist: TimestepDistribution, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| match dist {
            TimestepDistribution::Uniform => rng.random::<f64>(),
            TimestepDistribution::LogitNormal => {
                let z: f64 = StandardNormal.sample(rng);
                1.0 / (1.0 + (-z).exp())
            }
        })
        .collect()
}

/// `x_t = (1 - t) x + t eps`, with `t` given per row.
pub fn interpolate<T: Real>(x: ArrayView2<T>, eps: ArrayView2<T>, t_rows: &[T]) -> Result<Array2<T>> {
    if x.shape() != eps.shape() || t_rows.len() != x.nrows() {
        return Err(Error::Shape(format!("x {:?}, eps {:?}, {} timesteps", x.shape(), eps.shape(), t_rows.len())));
    }
    if let Some(bad) = t_rows.iter().find(|t| !(**t >= T::zero() && **t <= T::one())) {
        return Err(Error::InvalidArgument(format!("timestep {bad} outside [0, 1]")));
    }
    let mut out = x.to_owned();
    for ((mut o, e), &t) in out.rows_mut().into_iter().zip(eps.rows()).zip(t_rows) {
        let keep = T::one() - t;
        ndarray::Zip::from(&mut o).and(&e).for_each(|o, &e| *o = keep * *o + t * e);
    }
    Ok(out)
}

/// Constant velocity `u = eps - x` of the straight path.
pub fn target_velocity<T: Real>(x: ArrayView2<T>, eps: ArrayView2<T>) -> Result<Array2<T>> {
    if x.shape() != eps.shape() {
        return Err(Error::Shape(format!("x {:?} vs eps {:?}", x.shape(), eps.shape())));
    }
    Ok(&eps - &x)
}

/// Mean of squared differences over all elements.
pub fn mse<T: Real>(a: ArrayView2<T>, b: ArrayView2<T>) -> T {
    let n = T::from_usize(a.len()).unwrap();
    a.iter().zip(b.iter()).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / n
}

/// Flow-matching loss for an arbitrary velocity predictor `f(x_t, t_rows)`.
pub fn flow_loss_with<T: Real>(
    x: ArrayView2<T>,
    noise: &FlowNoise<T>,
    seq: usize,
    mut predictor: impl FnMut(&Array2<T>, &[T]) -> Result<Array2<T>>,
) -> Result<T> {
    let t_rows = noise.t_rows(seq);
    let x_t = interpolate(x, noise.eps.view(), &t_rows)?;
    let u = target_velocity(x, noise.eps.view())?;
    let v = predictor(&x_t, &t_rows)?;
    if v.shape() != u.shape() {
        return Err(Error::Shape(format!("predictor returned {:?}, expected {:?}", v.shape(), u.shape())));
    }
    Ok(mse(v.view(), u.view()))
}

/// Residual MLP layer `h + W gelu(ln(h))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualLayer<T> {
    pub norm: LayerNorm<T>,
    pub fc: Linear<T>,
}

/// Patch-local velocity head shared across all grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowHead<T> {
    pub input: Linear<T>,
    pub layers: Vec<ResidualLayer<T>>,
    pub out_norm: LayerNorm<T>,
    pub output: Linear<T>,
    patch_dim: usize,
}

pub struct HeadCache<T> {
    input: Array2<T>,
    layers: Vec<(LayerNormCache<T>, Array2<T>, Array2<T>)>,
    out_norm: LayerNormCache<T>,
    out_in: Array2<T>,
}

impl<T: Real> FlowHead<T> {
    pub fn new<R: Rng + ?Sized>(patch_dim: usize, cond_dim: usize, width: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            input: Linear::new(patch_dim + TIME_EMBED_DIM + cond_dim, width, rng),
            layers: (0..depth).map(|_| ResidualLayer { norm: LayerNorm::new(width), fc: Linear::new(width, width, rng) }).collect(),
            out_norm: LayerNorm::new(width),
            output: Linear::new(width, patch_dim, rng),
            patch_dim,
        }
    }

    /// Velocity for every patch row; row `r` depends only on `x_t[r]`, `t_rows[r]` and `c[r]`.
    pub fn predict_velocity(&self, x_t: ArrayView2<T>, t_rows: &[T], c: ArrayView2<T>) -> Result<(Array2<T>, HeadCache<T>)> {
        if x_t.nrows() != c.nrows() || x_t.nrows() != t_rows.len() || x_t.ncols() != self.patch_dim {
            return Err(Error::Shape(format!(
                "velocity head: x_t {:?}, {} timesteps, conditions {:?}",
                x_t.shape(),
                t_rows.len(),
                c.shape()
            )));
        }
        let temb = posenc::timestep_embedding(t_rows, TIME_EMBED_DIM);
        let input = concatenate(Axis(1), &[x_t.view(), temb.view(), c.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        let mut h = self.input.forward(input.view());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (n, ln) = layer.norm.forward(h.view());
            let a = gelu(&n);
            h += &layer.fc.forward(a.view());
            caches.push((ln, n, a));
        }
        let (out_in, out_norm) = self.out_norm.forward(h.view());
        let v = self.output.forward(out_in.view());
        if !all_finite(&v) {
            return Err(Error::NonFinite("predicted velocity".into()));
        }
        Ok((v, HeadCache { input, layers: caches, out_norm, out_in }))
    }

    /// Returns gradients with respect to `(x_t, c)`.
    pub fn backward(&mut self, cache: &HeadCache<T>, dv: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let d_out_in = self.output.backward(cache.out_in.view(), dv);
        let mut dh = self.out_norm.backward(&cache.out_norm, d_out_in.view());
        for (layer, (ln, n, a)) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let mut da = layer.fc.backward(a.view(), dh.view());
            gelu_backward(n, &mut da);
            dh += &layer.norm.backward(ln, da.view());
        }
        let din = self.input.backward(cache.input.view(), dh.view());
        let pd = self.patch_dim;
        let dx = din.slice(s![.., ..pd]).to_owned();
        let dc = din.slice(s![.., pd + TIME_EMBED_DIM..]).to_owned();
        (dx, dc)
    }
}

impl<T: Real> Params<T> for FlowHead<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.input.collect(&join(prefix, "input"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.norm.collect(&join(prefix, &format!("layer{i}.norm")), out);
            l.fc.collect(&join(prefix, &format!("layer{i}.fc")), out);
        }
        self.out_norm.collect(&join(prefix, "out_norm"), out);
        self.output.collect(&join(prefix, "output"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.input.collect_mut(&join(prefix, "input"), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.norm.collect_mut(&join(prefix, &format!("layer{i}.norm")), out);
            l.fc.collect_mut(&join(prefix, &format!("layer{i}.fc")), out);
        }
        self.out_norm.collect_mut(&join(prefix, "out_norm"), out);
        self.output.collect_mut(&join(prefix, "output"), out);
    }
}

/// `P_up`, position embeddings, global blocks and the velocity head.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDecoder<T> {
    pub p_up: Linear<T>,
    pub gtb: Vec<TransformerBlock<T>>,
    pub head: FlowHead<T>,
    pos: Array2<T>,
    pub mode: DecoderMode,
    patch_size: usize,
    grid: usize,
}

pub struct ConditionCache<T> {
    z: Array2<T>,
    blocks: Vec<BlockCache<T>>,
}

/// Saved activations of one loss evaluation.
pub struct LossCache<T> {
    head: HeadCache<T>,
    residual: Array2<T>,
}

impl<T: Real> FlowDecoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Self {
        let d = cfg.decoder_width();
        Self {
            p_up: Linear::new(cfg.latent_dim, d, rng),
            gtb: (0..cfg.gtb_depth).map(|_| TransformerBlock::new(d, cfg.num_heads, cfg.mlp_ratio, rng)).collect(),
            head: FlowHead::new(cfg.patch_dim(), d, cfg.flow_head_width, cfg.flow_head_depth, rng),
            pos: posenc::sincos_2d(cfg.grid(), cfg.grid(), d),
            mode: cfg.decoder_mode,
            patch_size: cfg.patch_size,
            grid: cfg.grid(),
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn image_size(&self) -> usize {
        self.patch_size * self.grid
    }

    /// `C = GTB(P_up(z) + PE)`; with no global blocks this is `P_up(z) + PE`.
    pub fn lift_and_globalize(&self, z: &LatentCode<T>) -> Result<(ConditionTokens<T>, ConditionCache<T>)> {
        let seq = self.grid * self.grid;
        if z.grid != self.grid || z.z.nrows() != z.batch * seq || z.z.ncols() != self.p_up.fan_in() {
            return Err(Error::Shape(format!("latent grid {} / shape {:?} does not match decoder grid {}", z.grid, z.z.shape(), self.grid)));
        }
        let mut x = self.p_up.forward(z.z.view());
        for b in 0..z.batch {
            let mut rows = x.slice_mut(s![b * seq..(b + 1) * seq, ..]);
            rows += &self.pos;
        }
        let mut caches = Vec::with_capacity(self.gtb.len());
        for block in &self.gtb {
            let (y, cache) = block.forward(&x, seq);
            caches.push(cache);
            x = y;
        }
        if !all_finite(&x) {
            return Err(Error::NonFinite("condition tokens".into()));
        }
        Ok((ConditionTokens { c: x, batch: z.batch, grid: self.grid }, ConditionCache { z: z.z.clone(), blocks: caches }))
    }

    /// Gradient with respect to the latent code.
    pub fn condition_backward(&mut self, cache: &ConditionCache<T>, dc: Array2<T>) -> Array2<T> {
        let mut g = dc;
        for (block, c) in self.gtb.iter_mut().zip(&cache.blocks).rev() {
            g = block.backward(c, g.view());
        }
        self.p_up.backward(cache.z.view(), g.view())
    }

    /// Per-element mean squared error of the decoder objective.
    ///
    /// Flow mode regresses `eps - x` at `x_t`; regression mode regresses the
    /// clean patch from the condition alone (zero `x_t`, `t = 0`).
    pub fn loss(&self, patches: ArrayView2<T>, cond: &ConditionTokens<T>, noise: &FlowNoise<T>) -> Result<(T, LossCache<T>)> {
        if patches.shape() != noise.eps.shape() || patches.nrows() != cond.c.nrows() {
            return Err(Error::Shape(format!("patches {:?}, noise {:?}, conditions {:?}", patches.shape(), noise.eps.shape(), cond.c.shape())));
        }
        let seq = cond.seq();
        let (x_t, t_rows, target) = match self.mode {
            DecoderMode::Flow => {
                let t_rows = noise.t_rows(seq);
                (interpolate(patches, noise.eps.view(), &t_rows)?, t_rows, target_velocity(patches, noise.eps.view())?)
            }
            DecoderMode::Regression => (Array2::zeros(patches.raw_dim()), vec![T::zero(); patches.nrows()], patches.to_owned()),
        };
        let (v, head) = self.head.predict_velocity(x_t.view(), &t_rows, cond.c.view())?;
        let loss = mse(v.view(), target.view());
        Ok((loss, LossCache { head, residual: v - target }))
    }

    /// Backpropagates `scale * loss` into the head; returns the gradient for the conditions.
    pub fn loss_backward(&mut self, cache: &LossCache<T>, scale: T) -> Array2<T> {
        let k = scale * T::lit(2.0) / T::from_usize(cache.residual.len()).unwrap();
        let dv = cache.residual.mapv(|r| r * k);
        self.head.backward(&cache.head, dv.view()).1
    }

    /// Decodes conditions to images: Euler integration from noise for flow
    /// mode, a single direct prediction for regression mode.
    pub fn sample<R: Rng + ?Sized>(&self, cond: &ConditionTokens<T>, steps: usize, rng: &mut R) -> Result<ImageBatch> {
        let size = self.image_size();
        let pd = self.head.patch_dim;
        let patches = match self.mode {
            DecoderMode::Flow => {
                let eps = Array2::from_shape_simple_fn((cond.c.nrows(), pd), || T::lit(StandardNormal.sample(rng)));
                euler_integrate(&HeadField { head: &self.head, cond }, eps, steps)?
            }
            DecoderMode::Regression => {
                let zeros = Array2::zeros((cond.c.nrows(), pd));
                self.head.predict_velocity(zeros.view(), &vec![T::zero(); cond.c.nrows()], cond.c.view())?.0
            }
        };
        patches_to_images(patches.view(), cond.batch, size, self.patch_size)
    }
}

impl<T: Real> Params<T> for FlowDecoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.p_up.collect(&join(prefix, "p_up"), out);
        for (i, b) in self.gtb.iter().enumerate() {
            b.collect(&join(prefix, &format!("gtb.block{i}")), out);
        }
        self.head.collect(&join(prefix, "head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.p_up.collect_mut(&join(prefix, "p_up"), out);
        for (i, b) in self.gtb.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("gtb.block{i}")), out);
        }
        self.head.collect_mut(&join(prefix, "head"), out);
    }
}

/// A velocity field `v(x_t, t)` over patch rows.
pub trait VelocityField<T> {
    fn velocity(&self, x_t: &Array2<T>, t: T) -> Result<Array2<T>>;
}

/// The learned head evaluated against fixed condition tokens.
pub struct HeadField<'a, T> {
    pub head: &'a FlowHead<T>,
    pub cond: &'a ConditionTokens<T>,
}

impl<T: Real> VelocityField<T> for HeadField<'_, T> {
    fn velocity(&self, x_t: &Array2<T>, t: T) -> Result<Array2<T>> {
        let t_rows = vec![t; x_t.nrows()];
        Ok(self.head.predict_velocity(x_t.view(), &t_rows, self.cond.c.view())?.0)
    }
}

/// Uniform Euler steps from `t = 1` to `t = 0`: `x <- x - v(x, t) / steps`.
pub fn euler_integrate<T: Real, F: VelocityField<T> + ?Sized>(field: &F, start: Array2<T>, steps: usize) -> Result<Array2<T>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("euler sampling needs at least one step".into()));
    }
    let dt = T::one() / T::from_usize(steps).unwrap();
    let mut x = start;
    for k in 0..steps {
        let t = T::one() - T::from_usize(k).unwrap() * dt;
        let v = field.velocity(&x, t)?;
        x.scaled_add(-dt, &v);
        if !all_finite(&x) {
            return Err(Error::NonFinite(format!("euler state after step {} of {steps} (t = {t})", k + 1)));
        }
    }
    Ok(x)
}

/// Starts from fresh noise, integrates `field`, reassembles and clamps to `[-1, 1]`.
pub fn euler_sample<T: Real, F: VelocityField<T> + ?Sized, R: Rng + ?Sized>(
    field: &F,
    batch: usize,
    image_size: usize,
    patch_size: usize,
    steps: usize,
    rng: &mut R,
) -> Result<ImageBatch> {
    let rows = batch * (image_size / patch_size).pow(2);
    let eps = Array2::from_shape_simple_fn((rows, patch_size * patch_size * 3), || T::lit(StandardNormal.sample(rng)));
    let x = euler_integrate(field, eps, steps)?;
    patches_to_images(x.view(), batch, image_size, patch_size)
}

fn patches_to_images<T: Real>(patches: ArrayView2<T>, batch: usize, size: usize, p: usize) -> Result<ImageBatch> {
    let imgs = unpatchify(patches, batch, size, size, p)?;
    ImageBatch::new(imgs.mapv(|v| v.as_f64().clamp(-1.0, 1.0) as f32), None)
}

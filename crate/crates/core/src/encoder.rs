//! ViT-style encoder with per-block feature taps, the frozen teacher and the
//! latent projection `P_down`.

use ndarray::{s, Array2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TeacherSource};
use crate::data::{Dataset, ImageBatch};
use crate::error::{Error, Result};
use crate::flowdec::patchify;
use crate::nn::{all_finite, join, posenc, BlockCache, Linear, Param, Params, Real, TransformerBlock};
use crate::optim::{adam_step, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Student,
    Teacher,
}

/// Post-block token grids, one `(batch * seq, dim)` matrix per layer.
#[derive(Debug, Clone)]
pub struct LayerFeatureStack<T> {
    pub per_layer: Vec<Array2<T>>,
    pub batch: usize,
    pub seq: usize,
    pub source: FeatureSource,
}

impl<T: Real> LayerFeatureStack<T> {
    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn final_layer(&self) -> &Array2<T> {
        self.per_layer.last().expect("at least one layer")
    }

    /// Layer `l` (0-based) as `(batch, seq, dim)`.
    pub fn layer(&self, l: usize) -> ArrayView3<'_, T> {
        let a = &self.per_layer[l];
        a.view().into_shape_with_order((self.batch, self.seq, a.ncols())).expect("contiguous tokens")
    }

    /// The images at `idx`, in that order.
    pub fn select_images(&self, idx: &[usize]) -> Self {
        let seq = self.seq;
        let per_layer = self
            .per_layer
            .iter()
            .map(|a| {
                let mut out = Array2::zeros((idx.len() * seq, a.ncols()));
                for (k, &i) in idx.iter().enumerate() {
                    out.slice_mut(s![k * seq..(k + 1) * seq, ..]).assign(&a.slice(s![i * seq..(i + 1) * seq, ..]));
                }
                out
            })
            .collect();
        Self { per_layer, batch: idx.len(), seq, source: self.source }
    }

    /// Concatenates stacks along the image axis.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("no feature stacks to concatenate".into()))?;
        if parts.iter().any(|p| p.seq != first.seq || p.len() != first.len()) {
            return Err(Error::Shape("feature stacks disagree on layers or sequence length".into()));
        }
        let per_layer = (0..first.len())
            .map(|l| {
                let views: Vec<_> = parts.iter().map(|p| p.per_layer[l].view()).collect();
                ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { per_layer, batch: parts.iter().map(|p| p.batch).sum(), seq: first.seq, source: first.source })
    }
}

/// Compact code `z`, stored as `(batch * grid_h * grid_w, latent_dim)` in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub z: Array2<T>,
    pub batch: usize,
    pub grid: usize,
}

impl<T: Real> LatentCode<T> {
    /// `(batch, grid, grid, latent_dim)` view.
    pub fn as_grid(&self) -> ndarray::ArrayView4<'_, T> {
        self.z
            .view()
            .into_shape_with_order((self.batch, self.grid, self.grid, self.z.ncols()))
            .expect("contiguous latent")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pos: Array2<T>,
    patch_size: usize,
    grid: usize,
    frozen: bool,
}

pub struct EncoderCache<T> {
    patches: Array2<T>,
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, rng: &mut R) -> Self {
        let d = cfg.hidden_dim;
        Self {
            patch_embed: Linear::new(cfg.patch_dim(), d, rng),
            blocks: (0..cfg.encoder_layers).map(|_| TransformerBlock::new(d, cfg.num_heads, cfg.mlp_ratio, rng)).collect(),
            pos: posenc::sincos_2d(cfg.grid(), cfg.grid(), d),
            patch_size: cfg.patch_size,
            grid: cfg.grid(),
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn thawed(mut self) -> Self {
        self.frozen = false;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.patch_embed.fan_out()
    }

    pub fn seq_len(&self) -> usize {
        self.grid * self.grid
    }

    /// Runs the encoder, returning every block output in layer order.
    pub fn encode_layers(&self, images: &ImageBatch, source: FeatureSource) -> Result<(LayerFeatureStack<T>, EncoderCache<T>)> {
        let size = self.grid * self.patch_size;
        images.check_size(size)?;
        let patches: Array2<T> = patchify(images.data.view(), self.patch_size)?;
        self.encode_patches(patches, images.len(), source)
    }

    pub fn encode_patches(&self, patches: Array2<T>, batch: usize, source: FeatureSource) -> Result<(LayerFeatureStack<T>, EncoderCache<T>)> {
        let seq = self.seq_len();
        if patches.nrows() != batch * seq || patches.ncols() != self.patch_embed.fan_in() {
            return Err(Error::Shape(format!(
                "encoder expects ({}, {}) patches, got {:?}",
                batch * seq,
                self.patch_embed.fan_in(),
                patches.shape()
            )));
        }
        let mut x = self.patch_embed.forward(patches.view());
        for b in 0..batch {
            let mut rows = x.slice_mut(s![b * seq..(b + 1) * seq, ..]);
            rows += &self.pos;
        }
        let mut taps = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, cache) = block.forward(&x, seq);
            if !all_finite(&y) {
                return Err(Error::NonFinite(format!("{source:?} encoder layer {}", l + 1)));
            }
            taps.push(y.clone());
            caches.push(cache);
            x = y;
        }
        Ok((LayerFeatureStack { per_layer: taps, batch, seq, source }, EncoderCache { patches, blocks: caches }))
    }

    /// Backpropagates gradients injected at any subset of the layer taps.
    pub fn backward(&mut self, cache: &EncoderCache<T>, tap_grads: Vec<Option<Array2<T>>>) {
        assert!(!self.frozen, "frozen encoder must never receive gradients");
        assert_eq!(tap_grads.len(), self.blocks.len());
        let mut grad: Option<Array2<T>> = None;
        for (l, injected) in tap_grads.into_iter().enumerate().rev() {
            grad = match (grad, injected) {
                (Some(mut g), Some(i)) => {
                    g += &i;
                    Some(g)
                }
                (g, i) => g.or(i),
            };
            if let Some(g) = grad.take() {
                grad = Some(self.blocks[l].backward(&cache.blocks[l], g.view()));
            }
        }
        if let Some(g) = grad {
            self.patch_embed.accumulate(cache.patches.view(), g.view());
        }
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("block{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("block{i}")), out);
        }
    }
}

/// Tokenwise `z = P_down(h)` reshaped onto the patch grid. No nonlinearity.
pub fn project_latent<T: Real>(final_layer: &Array2<T>, p_down: &Linear<T>, batch: usize) -> Result<LatentCode<T>> {
    if final_layer.ncols() != p_down.fan_in() || batch == 0 || !final_layer.nrows().is_multiple_of(batch) {
        return Err(Error::Shape(format!("cannot project {:?} with P_down {}x{}", final_layer.shape(), p_down.fan_in(), p_down.fan_out())));
    }
    let seq = final_layer.nrows() / batch;
    let grid = (seq as f64).sqrt().round() as usize;
    if grid * grid != seq {
        return Err(Error::Shape(format!("{seq} tokens do not form a square grid")));
    }
    Ok(LatentCode { z: p_down.forward(final_layer.view()), batch, grid })
}

/// Mean over each image's tokens: `(batch * seq, d) -> (batch, d)`.
pub fn mean_pool<T: Real>(tokens: &Array2<T>, batch: usize) -> Array2<T> {
    let seq = tokens.nrows() / batch;
    let v = tokens.view().into_shape_with_order((batch, seq, tokens.ncols())).expect("contiguous tokens");
    v.mean_axis(Axis(1)).expect("non-empty sequence")
}

/// Result of building the frozen teacher.
pub struct Teacher<T> {
    pub encoder: Encoder<T>,
    /// Training-set accuracy of the proxy classifier (pretrained teachers only).
    pub probe_accuracy: Option<f64>,
}

/// Builds the frozen teacher.
///
/// `CopyOfStudentInit` freezes a copy of `student_init`. `PretrainedProbeTeacher`
/// trains a fresh encoder with a mean-pooled linear classifier on the labelled
/// `data` for `teacher_pretrain_steps`, then freezes it.
pub fn make_teacher<T: Real, R: Rng + ?Sized>(
    cfg: &RunConfig,
    student_init: &Encoder<T>,
    data: Option<&Dataset>,
    rng: &mut R,
) -> Result<Teacher<T>> {
    match cfg.teacher_source {
        TeacherSource::CopyOfStudentInit => Ok(Teacher { encoder: student_init.clone().frozen(), probe_accuracy: None }),
        TeacherSource::PretrainedProbeTeacher => {
            let data = data.ok_or_else(|| Error::Dataset("pretrained_probe_teacher needs a labelled training set".into()))?;
            let (encoder, acc) = pretrain_probe_teacher(cfg, data, rng)?;
            Ok(Teacher { encoder: encoder.frozen(), probe_accuracy: Some(acc) })
        }
    }
}

fn pretrain_probe_teacher<T: Real, R: Rng + ?Sized>(cfg: &RunConfig, data: &Dataset, rng: &mut R) -> Result<(Encoder<T>, f64)> {
    let labels = data.labels().ok_or_else(|| Error::Dataset("teacher pretraining needs class labels".into()))?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Dataset("teacher pretraining needs at least two classes".into()));
    }
    let mut enc = Encoder::<T>::new(cfg, rng);
    let mut head = Linear::<T>::new(enc.dim(), classes, rng);
    let adam = AdamConfig::new(1e-3, (0.9, 0.999), 0.0);
    let spe = data.steps_per_epoch(cfg.batch_size);
    let seed = rng.random::<u64>();
    for step in 0..cfg.teacher_pretrain_steps {
        let batch = data.batch_at(cfg.batch_size, seed, (step / spe) as u64, step % spe);
        let y = batch.labels.as_ref().expect("labelled");
        let (stack, cache) = enc.encode_layers(&batch, FeatureSource::Teacher)?;
        let pooled = mean_pool(stack.final_layer(), batch.len());
        let logits = head.forward(pooled.view());
        let (_, dlogits) = softmax_cross_entropy(&logits, y);
        let dpooled = head.backward(pooled.view(), dlogits.view());
        let seq = stack.seq;
        let inv = T::one() / T::from_usize(seq).unwrap();
        let mut dfinal = Array2::zeros(stack.final_layer().raw_dim());
        for (b, row) in dpooled.rows().into_iter().enumerate() {
            for s_ in 0..seq {
                dfinal.row_mut(b * seq + s_).assign(&(&row * inv));
            }
        }
        let mut taps = vec![None; enc.num_layers()];
        *taps.last_mut().unwrap() = Some(dfinal);
        enc.backward(&cache, taps);
        let mut params = enc.params_mut("enc");
        params.extend(head.params_mut("head"));
        adam_step(&mut params, step as u64 + 1, &adam);
        for (_, p) in params.iter_mut() {
            p.zero_grad();
        }
    }
    let mut correct = 0usize;
    for batch in data.ordered_batches(cfg.batch_size) {
        let (stack, _) = enc.encode_layers(&batch, FeatureSource::Teacher)?;
        let logits = head.forward(mean_pool(stack.final_layer(), batch.len()).view());
        for (row, &y) in logits.rows().into_iter().zip(batch.labels.as_ref().unwrap()) {
            let pred = row.iter().enumerate().fold((0, T::neg_infinity()), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0;
            correct += usize::from(pred == y);
        }
    }
    let acc = correct as f64 / data.len() as f64;
    log::info!("probe teacher pretrained for {} steps, train accuracy {acc:.3}", cfg.teacher_pretrain_steps);
    Ok((enc, acc))
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub(crate) fn softmax_cross_entropy<T: Real>(logits: &Array2<T>, labels: &[usize]) -> (f64, Array2<T>) {
    let n = T::from_usize(logits.nrows()).unwrap();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        loss -= row[y].as_f64().max(1e-300).ln();
        row[y] -= T::one();
        row.mapv_inplace(|v| v / n);
    }
    (loss / labels.len() as f64, grad)
}

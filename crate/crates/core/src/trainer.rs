//! Joint optimization of the student encoder and the flow decoder.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{decode_rng, encode_rng, Checkpoint};
use crate::config::{DecoderMode, RunConfig, TeacherSource};
use crate::data::{Dataset, ImageBatch};
use crate::distill::{distillation_grad, strategy_loss, AdaptiveWeights};
use crate::encoder::{make_teacher, project_latent, Encoder, FeatureSource, LayerFeatureStack};
use crate::error::{Error, Result};
use crate::flowdec::{patchify, FlowDecoder, FlowNoise};
use crate::nn::{join, Linear, Param, Params, Real};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig};

/// Consecutive non-finite gradient steps tolerated before aborting.
pub const MAX_CONSECUTIVE_SKIPS: u32 = 3;
const CSV_FLUSH_EVERY: u64 = 50;
/// Largest teacher feature table [`train_loop`] precomputes.
pub const TEACHER_CACHE_BYTES: usize = 1 << 30;

/// Student, frozen teacher, latent projection and decoder.
///
/// Only the student, `P_down` and the decoder are trainable; the teacher is
/// reachable through [`Model::teacher`] and never appears in [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub student: Encoder<T>,
    teacher: Encoder<T>,
    pub p_down: Linear<T>,
    pub decoder: FlowDecoder<T>,
}

/// Per-step losses and the distillation weighting actually used.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss_dist: f64,
    pub loss_flow: f64,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
    pub lr: f64,
    pub wall_ms: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

impl StepRecord {
    /// Same losses, weights and flags; wall-clock excluded.
    pub fn same_trajectory(&self, other: &StepRecord) -> bool {
        self.step == other.step
            && self.loss_total.to_bits() == other.loss_total.to_bits()
            && self.loss_dist.to_bits() == other.loss_dist.to_bits()
            && self.loss_flow.to_bits() == other.loss_flow.to_bits()
            && self.alpha == other.alpha
            && self.weights == other.weights
            && self.grad_norm.to_bits() == other.grad_norm.to_bits()
            && self.skipped == other.skipped
    }

    pub fn csv_header(layers: usize) -> String {
        let mut cols = vec!["step".to_string(), "loss_total".into(), "loss_dist".into(), "loss_flow".into()];
        cols.extend((1..=layers).map(|l| format!("alpha_{l}")));
        cols.extend((1..=layers).map(|l| format!("w_{l}")));
        cols.push("lr".into());
        cols.push("wall_ms".into());
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![self.step.to_string(), self.loss_total.to_string(), self.loss_dist.to_string(), self.loss_flow.to_string()];
        cols.extend(self.alpha.iter().map(f64::to_string));
        cols.extend(self.weights.iter().map(f64::to_string));
        cols.push(self.lr.to_string());
        cols.push(format!("{:.3}", self.wall_ms));
        cols.join(",")
    }
}

/// Losses from one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub dist: f64,
    pub flow: f64,
    pub weights: AdaptiveWeights,
}

impl<T: Real> Model<T> {
    /// Fresh model. The student starts as a copy of the teacher in both teacher modes.
    pub fn new<R: Rng + ?Sized>(cfg: &RunConfig, data: Option<&Dataset>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let student_init = Encoder::new(cfg, rng);
        let teacher = make_teacher(cfg, &student_init, data, rng)?.encoder;
        let student = match cfg.teacher_source {
            TeacherSource::CopyOfStudentInit => student_init,
            TeacherSource::PretrainedProbeTeacher => teacher.clone().thawed(),
        };
        Ok(Self { student, teacher, p_down: Linear::new(cfg.hidden_dim, cfg.latent_dim, rng), decoder: FlowDecoder::new(cfg, rng) })
    }

    /// Assembles a model from parts; `teacher` is frozen on the way in.
    pub fn from_parts(student: Encoder<T>, teacher: Encoder<T>, p_down: Linear<T>, decoder: FlowDecoder<T>) -> Self {
        Self { student: student.thawed(), teacher: teacher.frozen(), p_down, decoder }
    }

    pub fn teacher(&self) -> &Encoder<T> {
        &self.teacher
    }

    /// Total loss `lambda_d * L_dist + lambda_f * L_flow` without touching gradients.
    pub fn total_loss(&self, batch: &ImageBatch, noise: &FlowNoise<T>, cfg: &RunConfig) -> Result<LossParts> {
        let (parts, _) = self.evaluate_losses(batch, None, noise, cfg)?;
        Ok(parts)
    }

    /// Accumulates `d(total)/d(theta)` into every trainable parameter and returns the losses.
    ///
    /// The distillation weights are treated as constants.
    pub fn forward_backward(&mut self, batch: &ImageBatch, noise: &FlowNoise<T>, cfg: &RunConfig) -> Result<LossParts> {
        self.forward_backward_with(batch, None, noise, cfg)
    }

    /// [`Model::forward_backward`] with teacher features supplied by the caller.
    pub fn forward_backward_with(&mut self, batch: &ImageBatch, teacher: Option<LayerFeatureStack<T>>, noise: &FlowNoise<T>, cfg: &RunConfig) -> Result<LossParts> {
        let (parts, pass) = self.evaluate_losses(batch, teacher, noise, cfg)?;
        let Pass { student, student_cache, teacher, cond_cache, loss_cache } = pass;
        let layers = student.len();
        let mut taps: Vec<Option<Array2<T>>> = vec![None; layers];
        if cfg.lambda_d != 0.0 {
            let (_, _, grads) = distillation_grad(&student, &teacher, cfg.distill_strategy, cfg.beta, T::lit(cfg.lambda_d))?;
            for (tap, g) in taps.iter_mut().zip(grads) {
                *tap = Some(g);
            }
        }
        if cfg.lambda_f != 0.0 {
            let dc = self.decoder.loss_backward(&loss_cache, T::lit(cfg.lambda_f));
            let dz = self.decoder.condition_backward(&cond_cache, dc);
            let dh = self.p_down.backward(student.final_layer().view(), dz.view());
            let last = taps.last_mut().expect("at least one layer");
            match last {
                Some(g) => *g += &dh,
                None => *last = Some(dh),
            }
        }
        if taps.iter().any(Option::is_some) {
            self.student.backward(&student_cache, taps);
        }
        Ok(parts)
    }

    fn evaluate_losses(&self, batch: &ImageBatch, teacher: Option<LayerFeatureStack<T>>, noise: &FlowNoise<T>, cfg: &RunConfig) -> Result<(LossParts, Pass<T>)> {
        let size = self.decoder.image_size();
        batch.check_size(size)?;
        let patches: Array2<T> = patchify(batch.data.view(), self.decoder.patch_size())?;
        let (student, student_cache) = self.student.encode_patches(patches.clone(), batch.len(), FeatureSource::Student)?;
        let teacher = match teacher {
            Some(t) if t.batch == batch.len() && t.seq == student.seq && t.len() == student.len() => t,
            Some(_) => return Err(Error::Shape("precomputed teacher features do not match the batch".into())),
            None => self.teacher.encode_patches(patches.clone(), batch.len(), FeatureSource::Teacher)?.0,
        };
        let (dist, weights) = strategy_loss(&student, &teacher, cfg.distill_strategy, cfg.beta)?;
        let z = project_latent(student.final_layer(), &self.p_down, batch.len())?;
        let (cond, cond_cache) = self.decoder.lift_and_globalize(&z)?;
        let (flow, loss_cache) = self.decoder.loss(patches.view(), &cond, noise)?;
        let (dist, flow) = (dist.as_f64(), flow.as_f64());
        let total = cfg.lambda_d * dist + cfg.lambda_f * flow;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("total loss (dist {dist}, flow {flow})")));
        }
        Ok((LossParts { total, dist, flow, weights }, Pass { student, student_cache, teacher, cond_cache, loss_cache }))
    }

    /// Encodes and decodes `images` in chunks of `chunk` images.
    pub fn reconstruct<R: Rng + ?Sized>(&self, images: &ImageBatch, steps: usize, chunk: usize, rng: &mut R) -> Result<ImageBatch> {
        self.reconstruct_with(images, steps, chunk, None, rng)
    }

    /// Like [`Model::reconstruct`] but image `i` is decoded from the conditions
    /// of image `perm[i]` within the same chunk.
    pub fn reconstruct_permuted<R: Rng + ?Sized>(&self, images: &ImageBatch, steps: usize, chunk: usize, perm: &[usize], rng: &mut R) -> Result<ImageBatch> {
        self.reconstruct_with(images, steps, chunk, Some(perm), rng)
    }

    fn reconstruct_with<R: Rng + ?Sized>(
        &self,
        images: &ImageBatch,
        steps: usize,
        chunk: usize,
        perm: Option<&[usize]>,
        rng: &mut R,
    ) -> Result<ImageBatch> {
        let chunk = chunk.max(1);
        let mut out = Vec::new();
        for start in (0..images.len()).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(images.len())).collect();
            let part = images.select(&idx);
            let (stack, _) = self.student.encode_layers(&part, FeatureSource::Student)?;
            let z = project_latent(stack.final_layer(), &self.p_down, part.len())?;
            let (mut cond, _) = self.decoder.lift_and_globalize(&z)?;
            if let Some(perm) = perm {
                let local: Vec<usize> = idx
                    .iter()
                    .map(|&i| {
                        let src = perm[i];
                        if src < start || src >= start + idx.len() {
                            Err(Error::InvalidArgument(format!("permutation maps {i} outside its chunk")))
                        } else {
                            Ok(src - start)
                        }
                    })
                    .collect::<Result<_>>()?;
                cond = cond.permute_images(&local);
            }
            out.push(self.decoder.sample(&cond, steps, rng)?);
        }
        ImageBatch::concat(&out)
    }

    /// Final-layer student and teacher features for `images`.
    pub fn final_features(&self, images: &ImageBatch) -> Result<(LayerFeatureStack<T>, LayerFeatureStack<T>)> {
        let (s, _) = self.student.encode_layers(images, FeatureSource::Student)?;
        let (t, _) = self.teacher.encode_layers(images, FeatureSource::Teacher)?;
        Ok((s, t))
    }

    /// Teacher features for every image of `data`, in dataset order.
    pub fn teacher_features(&self, data: &Dataset, chunk: usize) -> Result<LayerFeatureStack<T>> {
        let parts = data
            .ordered_batches(chunk.max(1))
            .map(|b| self.teacher.encode_layers(&b, FeatureSource::Teacher).map(|(f, _)| f))
            .collect::<Result<Vec<_>>>()?;
        LayerFeatureStack::concat(&parts)
    }

    /// Writes parameters (`value`), optimizer moments and the teacher.
    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        for (name, p) in self.params("") {
            ckpt.insert(&name, &p.value);
            ckpt.insert(format!("optim.m.{name}"), &p.m);
            ckpt.insert(format!("optim.v.{name}"), &p.v);
        }
        for (name, p) in self.teacher.params("teacher") {
            ckpt.insert(name, &p.value);
        }
    }

    /// Rebuilds a model from checkpoint arrays; shapes come from the stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig { teacher_source: TeacherSource::CopyOfStudentInit, ..ckpt.config.clone() };
        let mut model = Model::<T>::new(&cfg, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, p) in model.params_mut("") {
            load_param(ckpt, &name, p)?;
            p.m = ckpt.get(&format!("optim.m.{name}"))?;
            p.v = ckpt.get(&format!("optim.v.{name}"))?;
        }
        for (name, p) in model.teacher.params_mut("teacher") {
            load_param(ckpt, &name, p)?;
        }
        Ok(model)
    }
}

fn load_param<T: Real>(ckpt: &Checkpoint, name: &str, p: &mut Param<T>) -> Result<()> {
    let value: Array2<T> = ckpt.get(name)?;
    if value.dim() != p.value.dim() {
        return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, config implies {:?}", value.shape(), p.value.shape())));
    }
    p.value = value;
    Ok(())
}

struct Pass<T> {
    student: LayerFeatureStack<T>,
    student_cache: crate::encoder::EncoderCache<T>,
    teacher: LayerFeatureStack<T>,
    cond_cache: crate::flowdec::ConditionCache<T>,
    loss_cache: crate::flowdec::LossCache<T>,
}

impl<T: Real> Params<T> for Model<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        self.student.collect(&join(prefix, "encoder"), out);
        self.p_down.collect(&join(prefix, "encoder.p_down"), out);
        self.decoder.collect(&join(prefix, "decoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.student.collect_mut(&join(prefix, "encoder"), out);
        self.p_down.collect_mut(&join(prefix, "encoder.p_down"), out);
        self.decoder.collect_mut(&join(prefix, "decoder"), out);
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Completed optimizer steps.
    pub step: u64,
    pub model: Model<T>,
    pub rng: ChaCha8Rng,
    pub consecutive_skips: u32,
    pub total_skips: u64,
    pub clipped_steps: u64,
}

impl<T: Real> TrainState<T> {
    /// Model initialization and noise draws both come from `cfg.seed`.
    pub fn init(cfg: &RunConfig, data: Option<&Dataset>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(cfg, data, &mut rng)?;
        Ok(Self { step: 0, model, rng, consecutive_skips: 0, total_skips: 0, clipped_steps: 0 })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::new(cfg.clone(), self.step);
        self.model.write_to(&mut ckpt);
        ckpt.rng_state = encode_rng(&self.rng);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            step: ckpt.step,
            model: Model::from_checkpoint(ckpt)?,
            rng: decode_rng(&ckpt.rng_state)?,
            consecutive_skips: 0,
            total_skips: 0,
            clipped_steps: 0,
        })
    }
}

/// One optimizer step on `batch`. Non-finite gradients skip the update; the
/// third consecutive skip aborts.
pub fn train_step<T: Real>(batch: &ImageBatch, state: &mut TrainState<T>, cfg: &RunConfig) -> Result<StepRecord> {
    train_step_with(batch, None, state, cfg)
}

/// [`train_step`] with the batch's teacher features precomputed.
pub fn train_step_with<T: Real>(batch: &ImageBatch, teacher: Option<LayerFeatureStack<T>>, state: &mut TrainState<T>, cfg: &RunConfig) -> Result<StepRecord> {
    let started = Instant::now();
    let seq = cfg.seq_len();
    let noise = match cfg.decoder_mode {
        DecoderMode::Flow => FlowNoise::sample(batch.len(), seq, cfg.patch_dim(), cfg.timestep_distribution, &mut state.rng),
        DecoderMode::Regression => FlowNoise { eps: Array2::zeros((batch.len() * seq, cfg.patch_dim())), t: vec![T::zero(); batch.len()] },
    };
    state.model.zero_grad();
    let parts = state.model.forward_backward_with(batch, teacher, &noise, cfg)?;
    let mut params = state.model.params_mut("");
    let (grad_norm, clipped) = clip_grad_norm(&mut params, cfg.grad_clip);
    let step = state.step + 1;
    let skipped = !grad_norm.is_finite();
    if skipped {
        state.consecutive_skips += 1;
        state.total_skips += 1;
        log::warn!("step {step}: non-finite gradient norm, update skipped ({} in a row)", state.consecutive_skips);
        if state.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
            return Err(Error::Aborted { step, reason: format!("{MAX_CONSECUTIVE_SKIPS} consecutive non-finite gradients") });
        }
    } else {
        state.consecutive_skips = 0;
        if clipped {
            state.clipped_steps += 1;
            log::debug!("step {step}: gradient norm {grad_norm:.4} clipped to {}", cfg.grad_clip);
        }
        let adam = AdamConfig::new(cfg.learning_rate, cfg.optimizer_momenta, cfg.weight_decay);
        adam_step(&mut params, step, &adam);
    }
    state.step = step;
    Ok(StepRecord {
        step,
        loss_total: parts.total,
        loss_dist: parts.dist,
        loss_flow: parts.flow,
        alpha: parts.weights.penalties,
        weights: parts.weights.weights,
        lr: cfg.learning_rate,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        grad_norm,
        clipped,
        skipped,
    })
}

/// Where and how [`train_loop`] persists progress.
#[derive(Debug, Default)]
pub struct LoopOptions {
    /// Checkpoints and `metrics.csv` go here; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of initializing from the seed.
    pub resume: Option<Checkpoint>,
}

#[derive(Debug)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: Checkpoint,
    pub final_path: Option<PathBuf>,
}

/// Total optimizer steps for `cfg` on a dataset of `n` images.
pub fn planned_steps(cfg: &RunConfig, n: usize) -> u64 {
    let spe = n.div_ceil(cfg.batch_size.max(1)) as u64;
    let full = spe * cfg.epochs as u64;
    if cfg.max_steps > 0 {
        full.min(cfg.max_steps as u64)
    } else {
        full
    }
}

/// Runs `epochs * steps_per_epoch` steps (capped by `max_steps`), checkpointing
/// every `checkpoint_every` steps and at the end.
pub fn train_loop(cfg: &RunConfig, data: &Dataset, opts: LoopOptions) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut state = match &opts.resume {
        Some(ckpt) => {
            check_resumable(&ckpt.config, cfg)?;
            TrainState::from_checkpoint(ckpt)?
        }
        None => TrainState::<f32>::init(cfg, Some(data))?,
    };
    let total = planned_steps(cfg, data.len());
    let spe = data.steps_per_epoch(cfg.batch_size) as u64;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut csv = match &opts.out_dir {
        Some(dir) => Some(MetricsWriter::open(&dir.join("metrics.csv"), cfg.encoder_layers, opts.resume.is_some())?),
        None => None,
    };
    let table_bytes = data.len() * cfg.seq_len() * cfg.hidden_dim * cfg.encoder_layers * std::mem::size_of::<f32>();
    let teacher_table = if total > state.step && table_bytes <= TEACHER_CACHE_BYTES {
        log::info!("precomputing teacher features ({} MiB)", table_bytes >> 20);
        Some(state.model.teacher_features(data, cfg.batch_size)?)
    } else {
        None
    };
    let mut kept: Vec<PathBuf> = Vec::new();
    let mut records = Vec::with_capacity(total.saturating_sub(state.step) as usize);
    log::info!("training {} parameters for {total} steps ({spe} per epoch), starting at step {}", state.model.num_params(), state.step);
    while state.step < total {
        let epoch = state.step / spe;
        let index = (state.step % spe) as usize;
        let idx = data.batch_indices(cfg.batch_size, cfg.seed, epoch, index);
        let batch = data.images.select(&idx);
        let teacher = teacher_table.as_ref().map(|t| t.select_images(&idx));
        let record = train_step_with(&batch, teacher, &mut state, cfg).map_err(|e| match e {
            Error::Aborted { .. } => e,
            other => Error::Aborted {
                step: state.step + 1,
                reason: format!("{other}; last good checkpoint: {}", kept.last().map_or("none".into(), |p| p.display().to_string())),
            },
        })?;
        if let Some(w) = csv.as_mut() {
            w.push(&record)?;
        }
        if record.step % 100 == 0 {
            log::info!("step {}: total {:.5} dist {:.5} flow {:.5}", record.step, record.loss_total, record.loss_dist, record.loss_flow);
        }
        records.push(record);
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 && state.step < total {
                let path = dir.join(format!("ckpt_step{:07}.uflw", state.step));
                state.to_checkpoint(cfg).save(&path)?;
                kept.push(path);
                while kept.len() > cfg.keep_checkpoints.max(1) {
                    let old = kept.remove(0);
                    fs::remove_file(&old).map_err(|e| Error::io(&old, e))?;
                }
            }
        }
    }
    if let Some(w) = csv.as_mut() {
        w.flush()?;
    }
    let final_checkpoint = state.to_checkpoint(cfg);
    let final_path = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join("final.uflw");
            final_checkpoint.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { state, records, final_checkpoint, final_path })
}

/// Architecture fields must agree; schedule fields may differ.
fn check_resumable(saved: &RunConfig, cfg: &RunConfig) -> Result<()> {
    let arch = |c: &RunConfig| {
        (
            c.image_size,
            c.patch_size,
            c.encoder_layers,
            c.hidden_dim,
            c.latent_dim,
            c.gtb_depth,
            c.flow_head_depth,
            c.flow_head_width,
            c.num_heads,
            c.mlp_ratio,
            c.decoder_width(),
        )
    };
    if arch(saved) != arch(cfg) {
        return Err(Error::Checkpoint("checkpoint architecture does not match the run config".into()));
    }
    Ok(())
}

struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    pending: u64,
}

impl MetricsWriter {
    fn open(path: &Path, layers: usize, append: bool) -> Result<Self> {
        let exists = path.exists();
        let file = if append && exists {
            OpenOptions::new().append(true).open(path)
        } else {
            File::create(path)
        }
        .map_err(|e| Error::io(path, e))?;
        let mut w = Self { path: path.to_path_buf(), out: BufWriter::new(file), pending: 0 };
        if !(append && exists) {
            writeln!(w.out, "{}", StepRecord::csv_header(layers)).map_err(|e| Error::io(path, e))?;
        }
        Ok(w)
    }

    fn push(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.out, "{}", r.csv_row()).map_err(|e| Error::io(&self.path, e))?;
        self.pending += 1;
        if self.pending >= CSV_FLUSH_EVERY {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.pending = 0;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Moving average over the `window` records ending at `step` (1-based).
pub fn moving_average(values: &[f64], step: usize, window: usize) -> f64 {
    let end = step.min(values.len());
    let start = end.saturating_sub(window);
    let slice = &values[start..end];
    slice.iter().sum::<f64>() / slice.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    fn tiny() -> RunConfig {
        RunConfig {
            image_size: 8,
            patch_size: 4,
            encoder_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            latent_dim: 4,
            gtb_depth: 1,
            flow_head_depth: 1,
            flow_head_width: 8,
            batch_size: 4,
            epochs: 2,
            ..RunConfig::toy()
        }
    }

    #[test]
    fn degenerate_weightings_isolate_each_loss() {
        let data = synth::generate(4, 8, 1);
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::<f64>::new(&cfg, None, &mut rng).unwrap();
        model.student.patch_embed.bias.value.mapv_inplace(|v| v + 0.3);
        let noise = FlowNoise::sample(4, 4, 48, cfg.timestep_distribution, &mut rng);
        let d = model.total_loss(&data.images, &noise, &RunConfig { lambda_d: 1.0, lambda_f: 0.0, ..cfg.clone() }).unwrap();
        assert_eq!(d.total, d.dist);
        let f = model.total_loss(&data.images, &noise, &RunConfig { lambda_d: 0.0, lambda_f: 1.0, ..cfg.clone() }).unwrap();
        assert_eq!(f.total, f.flow);
        assert!(d.dist > 0.0 && f.flow > 0.0);
    }

    #[test]
    fn precomputed_teacher_features_match_per_batch_encoding() {
        let cfg = RunConfig { hidden_dim: 32, ..tiny() };
        let data = synth::generate(10, 8, 4);
        let model = Model::<f32>::new(&cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let table = model.teacher_features(&data, 4).unwrap();
        let idx = data.batch_indices(3, 9, 0, 1);
        let (direct, _) = model.teacher().encode_layers(&data.images.select(&idx), FeatureSource::Teacher).unwrap();
        assert_eq!(table.select_images(&idx).per_layer, direct.per_layer);
    }

    #[test]
    fn teacher_is_not_trainable() {
        let model = Model::<f32>::new(&tiny(), None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = model.params("").into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.starts_with("teacher")));
        assert!(names.iter().any(|n| n.starts_with("encoder.p_down")));
        assert!(names.iter().any(|n| n.starts_with("decoder.gtb.block0")));
        assert!(model.teacher().is_frozen());
    }

    #[test]
    fn fixed_point_with_zero_flow_weight_is_bitwise_stable() {
        let cfg = RunConfig { lambda_f: 0.0, lambda_d: 1.0, ..tiny() };
        let data = synth::generate(4, 8, 2);
        let mut state = TrainState::<f64>::init(&cfg, None).unwrap();
        let before = state.model.clone();
        let rec = train_step(&data.images, &mut state, &cfg).unwrap();
        assert_eq!(rec.loss_dist, 0.0);
        assert_eq!(rec.grad_norm, 0.0);
        assert_eq!(state.model, before);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = RunConfig { learning_rate: 0.0, ..tiny() };
        let data = synth::generate(4, 8, 2);
        let mut state = TrainState::<f32>::init(&cfg, None).unwrap();
        let before: Vec<_> = state.model.params("").into_iter().map(|(_, p)| p.value.clone()).collect();
        train_step(&data.images, &mut state, &cfg).unwrap();
        let after: Vec<_> = state.model.params("").into_iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn zero_epochs_checkpoint_is_the_initialization() {
        let cfg = RunConfig { epochs: 0, ..tiny() };
        let data = synth::generate(4, 8, 2);
        let out = train_loop(&cfg, &data, LoopOptions::default()).unwrap();
        assert!(out.records.is_empty());
        let init = TrainState::<f32>::init(&cfg, Some(&data)).unwrap().to_checkpoint(&cfg);
        assert_eq!(out.final_checkpoint.to_bytes(), init.to_bytes());
    }

    #[test]
    fn record_decomposition_and_csv_shape() {
        let cfg = RunConfig { lambda_d: 0.5, lambda_f: 2.0, ..tiny() };
        let data = synth::generate(8, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&cfg, &data, LoopOptions { out_dir: Some(dir.path().into()), resume: None }).unwrap();
        assert_eq!(out.records.len(), 4);
        for r in &out.records {
            assert_eq!(r.loss_total, 0.5 * r.loss_dist + 2.0 * r.loss_flow);
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,loss_total,loss_dist,loss_flow,alpha_1,alpha_2,w_1,w_2,lr,wall_ms");
        assert_eq!(lines.len(), 5);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 10));
        assert!(dir.path().join("final.uflw").exists());
    }

    #[test]
    fn checkpoint_cadence_keeps_the_latest() {
        let cfg = RunConfig { epochs: 6, checkpoint_every: 2, keep_checkpoints: 2, ..tiny() };
        let data = synth::generate(8, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        train_loop(&cfg, &data, LoopOptions { out_dir: Some(dir.path().into()), resume: None }).unwrap();
        let mut names: Vec<String> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["ckpt_step0000008.uflw", "ckpt_step0000010.uflw", "final.uflw", "metrics.csv"]);
    }

    #[test]
    fn moving_average_windows() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(moving_average(&v, 10, 2), 9.5);
        assert_eq!(moving_average(&v, 3, 200), 2.0);
    }
}

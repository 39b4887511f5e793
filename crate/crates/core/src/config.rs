//! Run configuration and its `key = value` text format.
//!
//! ```text
//! # toy run
//! image_size = 32
//! patch_size = 4
//! optimizer_momenta = 0.5, 0.95
//! teacher_source = copy_of_student_init
//! ```
//!
//! Absent keys take their defaults. `#` starts a comment anywhere on a line.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! text_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

text_enum!(
    /// Distribution of flow-matching timesteps.
    TimestepDistribution { Uniform => "uniform", LogitNormal => "logit_normal" }
);

text_enum!(
    /// How the frozen teacher encoder is obtained.
    TeacherSource {
        CopyOfStudentInit => "copy_of_student_init",
        PretrainedProbeTeacher => "pretrained_probe_teacher",
    }
);

text_enum!(
    /// Per-layer weighting used by the distillation loss.
    DistillStrategy {
        FinalLayer => "final_layer",
        Uniform => "uniform",
        Progressive => "progressive",
        Adaptive => "adaptive",
    }
);

text_enum!(
    /// `flow` trains the velocity head; `regression` regresses pixels directly from the conditions.
    DecoderMode { Flow => "flow", Regression => "regression" }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_layers: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub gtb_depth: usize,
    pub flow_head_depth: usize,
    pub flow_head_width: usize,
    /// Distillation temperature.
    pub beta: f64,
    pub lambda_d: f64,
    pub lambda_f: f64,
    pub learning_rate: f64,
    pub optimizer_momenta: (f64, f64),
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub timestep_distribution: TimestepDistribution,
    pub teacher_source: TeacherSource,

    pub num_heads: usize,
    /// Feed-forward expansion inside every transformer block.
    pub mlp_ratio: usize,
    /// Decoder token width; `None` follows `hidden_dim`.
    pub decoder_dim: Option<usize>,
    pub distill_strategy: DistillStrategy,
    pub decoder_mode: DecoderMode,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many steps even if epochs remain; 0 means no cap.
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub keep_checkpoints: usize,
    pub teacher_pretrain_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            encoder_layers: 4,
            hidden_dim: 128,
            latent_dim: 64,
            gtb_depth: 6,
            flow_head_depth: 4,
            flow_head_width: 128,
            beta: 2.0,
            lambda_d: 1.0,
            lambda_f: 1.0,
            learning_rate: 2e-4,
            optimizer_momenta: (0.5, 0.95),
            batch_size: 64,
            epochs: 30,
            seed: 0,
            timestep_distribution: TimestepDistribution::Uniform,
            teacher_source: TeacherSource::CopyOfStudentInit,
            num_heads: 4,
            mlp_ratio: 2,
            decoder_dim: None,
            distill_strategy: DistillStrategy::Adaptive,
            decoder_mode: DecoderMode::Flow,
            weight_decay: 0.0,
            grad_clip: 1.0,
            max_steps: 0,
            checkpoint_every: 500,
            keep_checkpoints: 3,
            teacher_pretrain_steps: 200,
        }
    }
}

impl RunConfig {
    /// Desk-scale model: 32px images, 4px patches, 4x128 encoder, 32-d latent, 2 global blocks.
    pub fn toy() -> Self {
        Self { latent_dim: 32, gtb_depth: 2, ..Self::default() }
    }

    /// Full-size InternViT-style setting; `batch_size` may be set to 256 for
    /// the alternative reported global batch.
    pub fn paper_scale() -> Self {
        Self {
            image_size: 448,
            patch_size: 14,
            encoder_layers: 24,
            hidden_dim: 1024,
            latent_dim: 64,
            gtb_depth: 6,
            flow_head_depth: 12,
            flow_head_width: 1024,
            batch_size: 512,
            num_heads: 16,
            mlp_ratio: 4,
            ..Self::default()
        }
    }

    pub fn decoder_width(&self) -> usize {
        self.decoder_dim.unwrap_or(self.hidden_dim)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Pixel values per patch (`p * p * 3`).
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, msg: impl Into<String>) -> Result<()> {
            Err(Error::InvalidConfig { field, msg: msg.into() })
        }
        if self.patch_size == 0 {
            return bad("patch_size", "patch_size must be at least 1");
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image_size", "image_size not divisible by patch_size");
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers", "need at least one encoder layer");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim", "latent_dim must be at least 1");
        }
        if self.num_heads == 0 {
            return bad("num_heads", "num_heads must be at least 1");
        }
        for (field, dim) in [("hidden_dim", self.hidden_dim), ("decoder_dim", self.decoder_width())] {
            if dim == 0 || dim % 4 != 0 {
                return bad(field, format!("{field} must be a positive multiple of 4 (2D position embedding), got {dim}"));
            }
            if dim % self.num_heads != 0 {
                return bad(field, format!("{field} = {dim} not divisible by num_heads = {}", self.num_heads));
            }
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "mlp_ratio must be at least 1");
        }
        if self.flow_head_depth == 0 || self.flow_head_width == 0 {
            return bad("flow_head_depth", "flow head needs positive depth and width");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta", "beta must be a finite nonnegative number");
        }
        for (field, v) in [("lambda_d", self.lambda_d), ("lambda_f", self.lambda_f)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("{field} must be finite and nonnegative"));
            }
        }
        if self.lambda_d + self.lambda_f <= 0.0 {
            return bad("lambda_d", "lambda_d + lambda_f must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "learning_rate must be finite and nonnegative");
        }
        let (b1, b2) = self.optimizer_momenta;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad("optimizer_momenta", "momenta must lie in (0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay", "weight_decay must be finite and nonnegative");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad("grad_clip", "grad_clip must be finite and nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "batch_size must be at least 1");
        }
        if self.latent_dim > self.hidden_dim {
            log::warn!(
                "latent_dim {} exceeds hidden_dim {}: P_down expands rather than compresses",
                self.latent_dim,
                self.hidden_dim
            );
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("image_size", self.image_size.to_string());
        put("patch_size", self.patch_size.to_string());
        put("encoder_layers", self.encoder_layers.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("latent_dim", self.latent_dim.to_string());
        put("gtb_depth", self.gtb_depth.to_string());
        put("flow_head_depth", self.flow_head_depth.to_string());
        put("flow_head_width", self.flow_head_width.to_string());
        put("beta", self.beta.to_string());
        put("lambda_d", self.lambda_d.to_string());
        put("lambda_f", self.lambda_f.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("optimizer_momenta", format!("{}, {}", self.optimizer_momenta.0, self.optimizer_momenta.1));
        put("batch_size", self.batch_size.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("timestep_distribution", self.timestep_distribution.to_string());
        put("teacher_source", self.teacher_source.to_string());
        put("num_heads", self.num_heads.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("decoder_dim", self.decoder_dim.map_or_else(|| "auto".to_string(), |d| d.to_string()));
        put("distill_strategy", self.distill_strategy.to_string());
        put("decoder_mode", self.decoder_mode.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("max_steps", self.max_steps.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("keep_checkpoints", self.keep_checkpoints.to_string());
        put("teacher_pretrain_steps", self.teacher_pretrain_steps.to_string());
        s
    }

    /// Parses config text. `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: String| Error::Parse { path: origin.to_string(), line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V, String> {
            value.parse().map_err(|_| format!("`{key}`: cannot parse `{value}`"))
        }
        fn choice<V: FromStr<Err = String>>(key: &str, value: &str) -> Result<V, String> {
            value.parse().map_err(|e| format!("`{key}`: {e}"))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "gtb_depth" => self.gtb_depth = num(key, value)?,
            "flow_head_depth" => self.flow_head_depth = num(key, value)?,
            "flow_head_width" => self.flow_head_width = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "lambda_d" => self.lambda_d = num(key, value)?,
            "lambda_f" => self.lambda_f = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "optimizer_momenta" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(format!("`{key}`: expected two comma-separated values, got `{value}`"));
                }
                self.optimizer_momenta = (num(key, parts[0])?, num(key, parts[1])?);
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "timestep_distribution" => self.timestep_distribution = choice(key, value)?,
            "teacher_source" => self.teacher_source = choice(key, value)?,
            "num_heads" => self.num_heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "decoder_dim" => {
                self.decoder_dim = if value == "auto" { None } else { Some(num(key, value)?) };
            }
            "distill_strategy" => self.distill_strategy = choice(key, value)?,
            "decoder_mode" => self.decoder_mode = choice(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "keep_checkpoints" => self.keep_checkpoints = num(key, value)?,
            "teacher_pretrain_steps" => self.teacher_pretrain_steps = num(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text, &path.display().to_string())
}

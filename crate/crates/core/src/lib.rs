//! Unified image tokenizer: a self-distilled ViT encoder whose final tokens
//! are projected to a compact latent grid, and a patch-wise pixel
//! rectified-flow decoder conditioned on globally mixed latent tokens.
//!
//! Training, evaluation metrics and ablation sweeps live alongside the model
//! so the CLI is a thin shell over this crate.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod flowdec;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use ablation::{run_ablation, AblationAxis, AblationReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{load_config, DecoderMode, DistillStrategy, RunConfig, TeacherSource, TimestepDistribution};
pub use data::{ingest_dataset, Dataset, ImageBatch, Split};
pub use distill::{adaptive_weights, alignment_penalty, distillation_loss, AdaptiveWeights};
pub use encoder::{Encoder, FeatureSource, LatentCode, LayerFeatureStack};
pub use error::{Error, Result};
pub use evalkit::{evaluate, frechet_proxy, linear_probe, psnr, seam_energy, ssim, teacher_alignment, MetricsReport};
pub use flowdec::{euler_sample, ConditionTokens, FlowDecoder, FlowNoise, VelocityField};
pub use trainer::{train_loop, train_step, Model, StepRecord, TrainState};

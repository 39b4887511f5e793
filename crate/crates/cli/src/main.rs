use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use uniflow::data::{synth, write_comparison_png};
use uniflow::evalkit::{self, EvalOptions, ProbeSplit};
use uniflow::trainer::{train_loop, LoopOptions, Model};
use uniflow::{load_checkpoint, load_config, run_ablation, AblationAxis, Dataset, ImageBatch, RunConfig, Split};

#[derive(Parser)]
#[command(name = "uniflow", version, about = "Train and evaluate a self-distilled pixel-flow image tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines); defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; every artifact is written below it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tokenizer on <data>/train.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root containing `train/`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Encode and decode a directory of images.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of images (flat or with class subdirectories).
        #[arg(long)]
        images: PathBuf,
        /// Euler steps from noise to image.
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute reconstruction and representation metrics on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per setting of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// distill_strategy, loss_balance, gtb_depth or beta.
        #[arg(long)]
        axis: AblationAxis,
        /// Dataset root containing `train/` and `eval/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        /// Overrides the configured step cap for every run.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Linear probe on frozen student features.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root with labelled `train/` and `eval/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the procedural labelled corpus as PNG files.
    MakeCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2048)]
        train: usize,
        #[arg(long, default_value_t = 512)]
        eval: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Bad input from the caller (exit 1) versus a failure while running (exit 2).
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<Vec<PathBuf>, Failure> {
    match command {
        Command::Train { common, data, resume, max_steps } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            let resume = resume.map(|p| load_checkpoint(&p).with_context(|| format!("loading {}", p.display()))).transpose().usage()?;
            let train = Dataset::load(&data, Split::Train, &cfg).usage()?;
            create_out(&common.out)?;
            write_text(&common.out.join("config.conf"), &cfg.to_text())?;
            let outcome = train_loop(&cfg, &train, LoopOptions { out_dir: Some(common.out.clone()), resume }).runtime()?;
            let mut artifacts = vec![common.out.join("config.conf"), common.out.join("metrics.csv")];
            artifacts.extend(outcome.final_path);
            Ok(artifacts)
        }
        Command::Reconstruct { checkpoint, images, steps, seed, out } => {
            let ckpt = load_checkpoint(&checkpoint).usage()?;
            let cfg = ckpt.config.clone();
            let data = Dataset::load_dir(&images, Split::Eval, &cfg).usage()?;
            if steps == 0 {
                return Err(Failure::Usage(anyhow::anyhow!("--steps must be at least 1")));
            }
            let model = Model::<f32>::from_checkpoint(&ckpt).runtime()?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(cfg.seed));
            let recon = model.reconstruct(&data.images, steps, cfg.batch_size, &mut rng).runtime()?;
            create_out(&out)?;
            let png = out.join("comparison.png");
            write_comparison_png(&png, &data.images, &recon).runtime()?;
            let per_image: Vec<_> = (0..data.len())
                .map(|i| {
                    let a = data.images.select(&[i]);
                    let b = recon.select(&[i]);
                    Ok(json!({
                        "index": i,
                        "psnr": json_db(evalkit::psnr(&a, &b)?),
                        "ssim": evalkit::ssim(&a, &b).ok(),
                        "seam_energy": evalkit::seam_energy(&b, cfg.patch_size).ok(),
                    }))
                })
                .collect::<uniflow::Result<_>>()
                .runtime()?;
            let record = json!({
                "psnr": json_db(evalkit::psnr(&data.images, &recon).runtime()?),
                "ssim": evalkit::ssim(&data.images, &recon).ok(),
                "seam_energy": evalkit::seam_energy(&recon, cfg.patch_size).ok(),
                "steps": steps,
                "images": per_image,
            });
            let json_path = out.join("reconstruction.json");
            write_text(&json_path, &serde_json::to_string_pretty(&record).expect("json"))?;
            Ok(vec![png, json_path])
        }
        Command::Evaluate { checkpoint, data, split, steps, seed, out } => {
            let ckpt = load_checkpoint(&checkpoint).usage()?;
            let cfg = ckpt.config.clone();
            let ds = Dataset::load(&data, split, &cfg).usage()?;
            let model = Model::<f32>::from_checkpoint(&ckpt).runtime()?;
            let opts = EvalOptions { euler_steps: steps.max(1), seed: seed.unwrap_or(cfg.seed), chunk: cfg.batch_size, probe: true };
            let (report, _) = evalkit::evaluate(&model, &ds, &opts).runtime()?;
            create_out(&out)?;
            let json_path = out.join("metrics.json");
            write_text(&json_path, &report.to_json())?;
            let csv_path = out.join("metrics.csv");
            append_csv_row(&csv_path, evalkit::MetricsReport::CSV_HEADER, &report.csv_row())?;
            Ok(vec![json_path, csv_path])
        }
        Command::Ablate { common, axis, data, steps, max_steps } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(m) = max_steps {
                cfg.max_steps = m;
            }
            let train = Dataset::load(&data, Split::Train, &cfg).usage()?;
            let eval = Dataset::load(&data, Split::Eval, &cfg).usage()?;
            create_out(&common.out)?;
            let opts = EvalOptions { euler_steps: steps.max(1), seed: cfg.seed, chunk: cfg.batch_size, probe: true };
            let report = run_ablation(axis, &cfg, &train, &eval, &opts, Some(&common.out)).runtime()?;
            let failed = report.rows.iter().filter(|r| r.outcome.is_err()).count();
            if failed == report.rows.len() {
                return Err(Failure::Runtime(anyhow::anyhow!("every {axis} setting failed")));
            }
            Ok(report.table_path.into_iter().collect())
        }
        Command::Probe { checkpoint, data, seed, out } => {
            let ckpt = load_checkpoint(&checkpoint).usage()?;
            let cfg = ckpt.config.clone();
            let train = Dataset::load(&data, Split::Train, &cfg).usage()?;
            let eval = Dataset::load(&data, Split::Eval, &cfg).usage()?;
            let model = Model::<f32>::from_checkpoint(&ckpt).runtime()?;
            let (train_labels, eval_labels) = match (train.labels(), eval.labels()) {
                (Some(a), Some(b)) => (a.to_vec(), b.to_vec()),
                _ => return Err(Failure::Usage(anyhow::anyhow!("probing needs class subdirectories in train/ and eval/"))),
            };
            let both = ImageBatch::concat(&[train.images.clone(), eval.images.clone()]).runtime()?;
            let features = student_features(&model, &both, cfg.batch_size).runtime()?;
            let labels: Vec<usize> = train_labels.iter().chain(&eval_labels).copied().collect();
            let split = ProbeSplit { train: (0..train.len()).collect(), test: (train.len()..both.len()).collect() };
            let result = evalkit::linear_probe(features.view(), &labels, &split).usage()?;
            create_out(&out)?;
            let path = out.join("probe.json");
            let record = json!({
                "probe_accuracy": result.accuracy,
                "train_accuracy": result.train_accuracy,
                "iterations": result.iterations,
                "grad_norm": result.grad_norm,
                "converged": result.converged,
                "train_images": train.len(),
                "eval_images": eval.len(),
                "seed": seed,
            });
            write_text(&path, &serde_json::to_string_pretty(&record).expect("json"))?;
            Ok(vec![path])
        }
        Command::MakeCorpus { out, train, eval, size, seed } => {
            if size < 8 {
                return Err(Failure::Usage(anyhow::anyhow!("--size must be at least 8")));
            }
            let mut written = synth::write_corpus(&out, Split::Train, train, size, seed).runtime()?;
            written.extend(synth::write_corpus(&out, Split::Eval, eval, size, seed.wrapping_add(1)).runtime()?);
            log::info!("wrote {} images", written.len());
            Ok(vec![out.join("train"), out.join("eval")])
        }
    }
}

fn resolve_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path).usage()?,
        None => RunConfig::toy(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().usage()?;
    Ok(cfg)
}

fn student_features(model: &Model<f32>, images: &ImageBatch, chunk: usize) -> uniflow::Result<ndarray::Array2<f64>> {
    let mut rows = Vec::new();
    for start in (0..images.len()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(images.len())).collect();
        let part = images.select(&idx);
        let (s, _) = model.final_features(&part)?;
        rows.push(uniflow::encoder::mean_pool(s.final_layer(), part.len()).mapv(f64::from));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| uniflow::Error::Shape(e.to_string()))
}

fn json_db(v: f64) -> serde_json::Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).runtime()
}

fn append_csv_row(path: &Path, header: &str, row: &str) -> Result<(), Failure> {
    let mut text = if path.exists() { fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).runtime()? } else { format!("{header}\n") };
    text.push_str(row);
    text.push('\n');
    write_text(path, &text)
}

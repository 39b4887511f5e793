//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach stdout.
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- 1 3 9`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniflow::data::synth;
use uniflow::distill::{adaptive_weights, base_weights, distillation_loss, layer_penalties};
use uniflow::encoder::{FeatureSource, LatentCode};
use uniflow::evalkit::{self, frechet_distance, psnr_from_mse};
use uniflow::flowdec::{euler_sample, patchify, FlowNoise, VelocityField};
use uniflow::nn::{Param, Params};
use uniflow::trainer::{moving_average, train_loop, LoopOptions, Model, StepRecord, TrainState};
use uniflow::{Checkpoint, Dataset, Error, ImageBatch, RunConfig};

type Verdict = Result<String, String>;

// adaptive weights
const WEIGHT_SUM_TOL: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-11;
// L = 2, beta = 2, alpha = (0.5, 0.1)
const ORACLE_WEIGHTS: [f64; 2] = [0.526_687_817_289, 0.473_312_182_711];
const ORACLE_LOSS: f64 = 0.310_675_126_916;

// fixed point
const FIXED_POINT_GRAD_TOL: f64 = 1e-8;

// gradient checks
const GRAD_REL_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-5;

// oracle integration
const ORACLE_RECON_TOL: f64 = 1e-6;

// jacobians
const GLOBAL_SENSITIVITY_MIN: f64 = 1e-9;

// toy training
const TOY_CORPUS: usize = 2048;
const TOY_EVAL: usize = 256;
const TOY_STEPS: usize = 2000;
const TOY_EARLY_STEP: usize = 100;
const TOY_WINDOW: usize = 200;
const TOY_LOSS_RATIO: f64 = 0.5;
const TOY_PSNR_GAP_DB: f64 = 5.0;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);

// loss balance and global blocks
const ABLATION_STEPS: usize = 600;

// metric kernels
const PSNR_TOL: f64 = 1e-9;
const SSIM_TOL: f64 = 1e-12;
const FRECHET_IDENTITY_TOL: f64 = 1e-9;
const FRECHET_SHIFT_TOL: f64 = 1e-6;

// persistence
const RESUME_TOTAL: usize = 12;
const RESUME_AT: usize = 7;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Verdict); 10] = [
        (1, "adaptive weights", adaptive_weight_suite),
        (2, "distillation fixed point", distillation_fixed_point),
        (3, "gradient checks", gradient_checks),
        (4, "oracle integration", oracle_integration),
        (5, "locality and globality", locality_globality),
        (9, "metric kernels", metric_kernels),
        (10, "persistence", persistence),
        (6, "toy training progress", toy_training),
        (7, "loss balance direction", loss_balance),
        (8, "global block seams", gtb_seams),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS criterion {id:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn adaptive_weight_suite() -> Verdict {
    let mut runner = TestRunner::new(ProptestConfig { cases: 512, failure_persistence: None, ..ProptestConfig::default() });
    let penalties = prop::collection::vec(0.0f64..2.0, 1..24);
    runner
        .run(&(penalties.clone(), 0.0f64..10.0), |(alpha, beta)| {
            let w = adaptive_weights(&alpha, beta).unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() <= WEIGHT_SUM_TOL);
            prop_assert!(w.weights.iter().all(|&x| x > 0.0));
            Ok(())
        })
        .map_err(|e| format!("sum to one: {e}"))?;
    runner
        .run(&penalties.clone(), |alpha| {
            let l = alpha.len() as f64;
            let w = adaptive_weights(&alpha, 0.0).unwrap();
            for (i, &wi) in w.weights.iter().enumerate() {
                let expected = 2.0 * (i + 1) as f64 / (l * (l + 1.0));
                prop_assert!((wi - expected).abs() <= WEIGHT_SUM_TOL, "layer {}: {} vs {}", i + 1, wi, expected);
            }
            Ok(())
        })
        .map_err(|e| format!("beta = 0 prior: {e}"))?;
    runner
        .run(&(1usize..24, 0.0f64..2.0, 0.0f64..10.0), |(layers, a, beta)| {
            let w = adaptive_weights(&vec![a; layers], beta).unwrap();
            let prior = adaptive_weights(&vec![0.0; layers], 0.0).unwrap();
            for (x, y) in w.weights.iter().zip(&prior.weights) {
                prop_assert!((x - y).abs() <= WEIGHT_SUM_TOL);
            }
            Ok(())
        })
        .map_err(|e| format!("equal-penalty cancellation: {e}"))?;
    runner
        .run(&(0.0f64..2.0, 0.0f64..2.0, 0.0f64..5.0, 0.01f64..5.0), |(a1, a2, b, db)| {
            prop_assume!((a1 - a2).abs() > 1e-6);
            let ratio = |beta: f64| {
                let w = adaptive_weights(&[a1, a2], beta).unwrap().weights;
                w[1] / w[0]
            };
            let (lo, hi) = (ratio(b), ratio(b + db));
            if a2 > a1 {
                prop_assert!(hi > lo);
            } else {
                prop_assert!(hi < lo);
            }
            Ok(())
        })
        .map_err(|e| format!("ratio monotonicity: {e}"))?;

    let w = adaptive_weights(&[0.5, 0.1], 2.0).map_err(err)?;
    let loss: f64 = w.weights.iter().zip(&w.penalties).map(|(w, a)| w * a).sum();
    for (got, want) in w.weights.iter().zip(ORACLE_WEIGHTS) {
        check((got - want).abs() <= ORACLE_TOL, format!("oracle weight {got} vs {want}"))?;
    }
    check((loss - ORACLE_LOSS).abs() <= ORACLE_TOL, format!("oracle loss {loss} vs {ORACLE_LOSS}"))?;
    check(base_weights(4) == vec![0.25, 0.5, 0.75, 1.0], "depth prior")?;
    Ok(format!("4 properties x 512 cases, oracle w = ({:.12}, {:.12})", w.weights[0], w.weights[1]))
}

fn small_config() -> RunConfig {
    RunConfig {
        image_size: 8,
        patch_size: 4,
        encoder_layers: 3,
        hidden_dim: 16,
        num_heads: 2,
        latent_dim: 4,
        gtb_depth: 1,
        flow_head_depth: 2,
        flow_head_width: 16,
        batch_size: 4,
        ..RunConfig::toy()
    }
}

fn max_abs_grad(model: &mut Model<f64>) -> f64 {
    model.params_mut("").iter().flat_map(|(_, p)| p.grad.iter().map(|g| g.abs())).fold(0.0, f64::max)
}

fn distillation_fixed_point() -> Verdict {
    let cfg = RunConfig { lambda_d: 1.0, lambda_f: 0.0, ..small_config() };
    let data = synth::generate(4, cfg.image_size, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::<f64>::new(&cfg, None, &mut rng).map_err(err)?;
    check(model.student == model.teacher().clone().thawed(), "student does not start as a teacher copy")?;
    let (student, _) = model.student.encode_layers(&data.images, FeatureSource::Student).map_err(err)?;
    let (teacher, _) = model.teacher().encode_layers(&data.images, FeatureSource::Teacher).map_err(err)?;
    let (loss, _) = distillation_loss(&student, &teacher, cfg.beta).map_err(err)?;
    check(loss == 0.0, format!("L_dist = {loss:e}"))?;
    check(layer_penalties(&student, &teacher).map_err(err)?.iter().all(|&a| a == 0.0), "non-zero layer penalty")?;
    let noise = FlowNoise::sample(4, cfg.seq_len(), cfg.patch_dim(), cfg.timestep_distribution, &mut rng);
    model.zero_grad();
    let parts = model.forward_backward(&data.images, &noise, &cfg).map_err(err)?;
    let g = max_abs_grad(&mut model);
    check(parts.dist == 0.0, format!("trainer L_dist = {:e}", parts.dist))?;
    check(g < FIXED_POINT_GRAD_TOL, format!("max |grad| = {g:e}"))?;
    Ok(format!("L_dist = 0, max |grad| = {g:e}"))
}

/// Central differences over every trainable scalar against the accumulated gradients.
fn gradient_mismatch(model: &Model<f64>, batch: &ImageBatch, noise: &FlowNoise<f64>, cfg: &RunConfig) -> Result<(f64, usize), String> {
    let mut analytic = model.clone();
    analytic.zero_grad();
    analytic.forward_backward(batch, noise, cfg).map_err(err)?;
    let names: Vec<(String, Array2<f64>)> = analytic.params("").into_iter().map(|(n, p)| (n, p.grad.clone())).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, grad) in &names {
        for (idx, &a) in grad.indexed_iter() {
            let at = |delta: f64| -> Result<f64, String> {
                let mut m = model.clone();
                let (_, p) = m.params_mut("").into_iter().find(|(n, _)| n == name).expect("known parameter");
                p.value[idx] += delta;
                m.total_loss(batch, noise, cfg).map(|l| l.total).map_err(err)
            };
            let fd = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FD_FLOOR);
            if rel > worst {
                worst = rel;
            }
            if rel > GRAD_REL_TOL {
                return Err(format!("{name}{idx:?}: analytic {a:e} vs numeric {fd:e} (rel {rel:e})"));
            }
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn gradient_checks() -> Verdict {
    // beta = 0 keeps the (detached) layer weights constant, so the finite
    // difference sees the same objective the analytic gradient differentiates
    let base = RunConfig {
        image_size: 4,
        patch_size: 2,
        encoder_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        latent_dim: 4,
        gtb_depth: 1,
        flow_head_depth: 1,
        flow_head_width: 8,
        beta: 0.0,
        ..RunConfig::toy()
    };
    let data = synth::generate(2, base.image_size, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut model = Model::<f64>::new(&base, None, &mut rng).map_err(err)?;
    for (_, p) in model.student.params_mut("") {
        p.value.mapv_inplace(|v| v + rng.random_range(-0.2..0.2));
    }
    let noise = FlowNoise::sample(2, base.seq_len(), base.patch_dim(), base.timestep_distribution, &mut rng);
    let mut report = Vec::new();
    for (label, ld, lf) in [("L_dist", 1.0, 0.0), ("L_flow", 0.0, 1.0), ("L_total", 1.0, 1.0)] {
        let cfg = RunConfig { lambda_d: ld, lambda_f: lf, ..base.clone() };
        let (worst, n) = gradient_mismatch(&model, &data.images, &noise, &cfg).map_err(|e| format!("{label}: {e}"))?;
        report.push(format!("{label} {n} coords max rel {worst:.1e}"));
    }
    Ok(report.join(", "))
}

/// The exact rectified-flow velocity toward known clean patches.
struct OracleField {
    clean: Array2<f64>,
}

impl VelocityField<f64> for OracleField {
    fn velocity(&self, x_t: &Array2<f64>, t: f64) -> uniflow::Result<Array2<f64>> {
        // on the straight path x_t = (1 - t) x + t eps, so (x_t - x) / t = eps - x
        Ok((x_t - &self.clean) / t)
    }
}

fn oracle_integration() -> Verdict {
    let data = synth::generate(6, 16, 8);
    let p = 4;
    let clean: Array2<f64> = patchify(data.images.data.view(), p).map_err(err)?;
    let field = OracleField { clean };
    let mut worst = Vec::new();
    for steps in [1, 8] {
        let out = euler_sample(&field, 6, 16, p, steps, &mut ChaCha8Rng::seed_from_u64(steps as u64)).map_err(err)?;
        let e = (&out.data - &data.images.data).iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
        check(e < ORACLE_RECON_TOL, format!("{steps} steps: max |error| {e:e}"))?;
        worst.push(format!("{steps} steps {e:.1e}"));
    }
    Ok(format!("max |error|: {}", worst.join(", ")))
}

fn locality_globality() -> Verdict {
    let grid = 3;
    let cfg = |k: usize| RunConfig {
        image_size: 6,
        patch_size: 2,
        encoder_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        latent_dim: 4,
        gtb_depth: k,
        flow_head_depth: 2,
        flow_head_width: 8,
        ..RunConfig::toy()
    };
    let cells = grid * grid;

    // head: patch A never sees x_t of patch B
    let model = Model::<f64>::new(&cfg(1), None, &mut ChaCha8Rng::seed_from_u64(4)).map_err(err)?;
    let head = &model.decoder.head;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x_t = Param::<f64>::normal(cells, 12, 1.0, &mut rng).value;
    let c = Param::<f64>::normal(cells, 8, 1.0, &mut rng).value;
    let t = vec![0.4; cells];
    let (v0, _) = head.predict_velocity(x_t.view(), &t, c.view()).map_err(err)?;
    for b in 0..cells {
        for j in 0..12 {
            let mut x2 = x_t.clone();
            x2[[b, j]] += 1e-3;
            let (v, _) = head.predict_velocity(x2.view(), &t, c.view()).map_err(err)?;
            for a in (0..cells).filter(|&a| a != b) {
                check(v.row(a) == v0.row(a), format!("head cell {a} responds to x_t of cell {b}"))?;
            }
            check(v.row(b) != v0.row(b), format!("head cell {b} ignores its own x_t"))?;
        }
    }

    // conditions: cell-local without global blocks, fully mixed with them
    let sensitivity = |k: usize| -> Result<Array2<f64>, String> {
        let model = Model::<f64>::new(&cfg(k), None, &mut ChaCha8Rng::seed_from_u64(6)).map_err(err)?;
        let z = Param::<f64>::normal(cells, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(7)).value;
        let cond = |z: Array2<f64>| model.decoder.lift_and_globalize(&LatentCode { z, batch: 1, grid }).map(|(c, _)| c.c).map_err(err);
        let base = cond(z.clone())?;
        let mut sens = Array2::zeros((cells, cells));
        let h = 1e-4;
        for j in 0..cells {
            for d in 0..4 {
                let mut zp = z.clone();
                zp[[j, d]] += h;
                let diff = cond(zp)? - &base;
                for i in 0..cells {
                    let s = diff.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs())) / h;
                    sens[[i, j]] = f64::max(sens[[i, j]], s);
                }
            }
        }
        Ok(sens)
    };
    let local = sensitivity(0)?;
    for ((i, j), &s) in local.indexed_iter() {
        if i == j {
            check(s > 0.0, format!("K=0: cell {i} ignores its own latent"))?;
        } else {
            check(s == 0.0, format!("K=0: cell {i} sees latent cell {j} ({s:e})"))?;
        }
    }
    let mut weakest = f64::INFINITY;
    for k in [1, 2] {
        let global = sensitivity(k)?;
        let min = global.iter().copied().fold(f64::INFINITY, f64::min);
        check(min > GLOBAL_SENSITIVITY_MIN, format!("K={k}: weakest cross-cell sensitivity {min:e}"))?;
        weakest = weakest.min(min);
    }
    Ok(format!("head and K=0 conditions exactly local; K>=1 weakest cross-cell sensitivity {weakest:.2e}"))
}

fn metric_kernels() -> Verdict {
    let p = psnr_from_mse(0.01, 1.0);
    check((p - 20.0).abs() <= PSNR_TOL, format!("PSNR(0.01, 1) = {p}"))?;
    let data = synth::generate(4, 16, 3);
    let ssim = evalkit::ssim(&data.images, &data.images).map_err(err)?;
    check((ssim - 1.0).abs() <= SSIM_TOL, format!("SSIM(x, x) = {ssim}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = Param::<f64>::normal(400, 6, 1.0, &mut rng).value;
    let same = frechet_distance(a.view(), a.view()).map_err(err)?;
    check(same.abs() <= FRECHET_IDENTITY_TOL, format!("frechet(a, a) = {same:e}"))?;
    let delta = ndarray::arr1(&[0.5, -1.0, 0.25, 2.0, 0.0, -0.75]);
    let shifted = &a + &delta;
    let d = frechet_distance(a.view(), shifted.view()).map_err(err)?;
    let want = delta.dot(&delta);
    check((d - want).abs() <= FRECHET_SHIFT_TOL, format!("mean shift: {d} vs {want}"))?;
    Ok(format!("PSNR {p}, SSIM {ssim}, frechet identity {same:.1e}, shift error {:.1e}", (d - want).abs()))
}

/// Values, optimizer moments and teacher agree bitwise; gradient buffers are scratch.
fn same_persisted_state(a: &Model<f32>, b: &Model<f32>) -> bool {
    let pa = a.params("");
    let pb = b.params("");
    pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|((na, x), (nb, y))| na == nb && x.value == y.value && x.m == y.m && x.v == y.v)
        && a.teacher() == b.teacher()
}

fn persistence() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig { epochs: 10, max_steps: RESUME_TOTAL, checkpoint_every: 0, ..small_config() };
    let data = synth::generate(10, cfg.image_size, 1);

    let straight = train_loop(&cfg, &data, LoopOptions { out_dir: Some(dir.path().join("straight")), resume: None }).map_err(err)?;
    let path = straight.final_path.clone().expect("final checkpoint written");
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::from_bytes(&bytes).map_err(err)?;
    check(loaded.to_bytes() == bytes, "checkpoint bytes differ after a load/save cycle")?;
    let restored = TrainState::<f32>::from_checkpoint(&loaded).map_err(err)?;
    check(same_persisted_state(&restored.model, &straight.state.model), "restored model differs")?;
    check(restored.step == straight.state.step, "restored step differs")?;

    let head_cfg = RunConfig { max_steps: RESUME_AT, ..cfg.clone() };
    let first = train_loop(&head_cfg, &data, LoopOptions { out_dir: Some(dir.path().join("first")), resume: None }).map_err(err)?;
    let resumed_from = Checkpoint::load(first.final_path.as_ref().expect("final checkpoint written")).map_err(err)?;
    let rest = train_loop(&cfg, &data, LoopOptions { out_dir: Some(dir.path().join("rest")), resume: Some(resumed_from) }).map_err(err)?;
    let joined: Vec<&StepRecord> = first.records.iter().chain(&rest.records).collect();
    check(joined.len() == straight.records.len(), format!("{} records after resume, {} straight", joined.len(), straight.records.len()))?;
    for (a, b) in joined.iter().zip(&straight.records) {
        check(a.same_trajectory(b), format!("step {} diverges after resume", b.step))?;
    }
    check(same_persisted_state(&rest.state.model, &straight.state.model), "resumed final parameters differ")?;
    check(rest.final_checkpoint.to_bytes() == straight.final_checkpoint.to_bytes(), "resumed final checkpoint differs")?;
    Ok(format!("{} byte checkpoint bitwise stable; resume at step {RESUME_AT} reproduces {RESUME_TOTAL} records", bytes.len()))
}

fn toy_config(max_steps: usize) -> RunConfig {
    RunConfig { epochs: max_steps.div_ceil(TOY_CORPUS / 64) + 1, max_steps, checkpoint_every: 0, ..RunConfig::toy() }
}

fn toy_data() -> (Dataset, Dataset) {
    (synth::generate(TOY_CORPUS, 32, 100), synth::generate(TOY_EVAL, 32, 200))
}

/// Each image paired with another image's conditions, never its own.
fn derangement(n: usize, chunk: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = Vec::with_capacity(n);
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let mut idx: Vec<usize> = (start..end).collect();
        idx.shuffle(&mut rng);
        // rotating a shuffled cycle leaves no fixed points
        let len = idx.len();
        let mut local = vec![0; len];
        for k in 0..len {
            local[idx[k] - start] = idx[(k + 1) % len];
        }
        perm.extend(local);
    }
    perm
}

fn toy_training() -> Verdict {
    let cfg = toy_config(TOY_STEPS);
    let (train, eval) = toy_data();
    let started = Instant::now();
    let out = train_loop(&cfg, &train, LoopOptions::default()).map_err(err)?;
    let elapsed = started.elapsed();
    check(out.records.len() == TOY_STEPS, format!("ran {} steps", out.records.len()))?;
    let flow: Vec<f64> = out.records.iter().map(|r| r.loss_flow).collect();
    let early = moving_average(&flow, TOY_EARLY_STEP, TOY_WINDOW);
    let late = moving_average(&flow, TOY_STEPS, TOY_WINDOW);
    let model = &out.state.model;
    let chunk = 64;
    let recon = model.reconstruct(&eval.images, 1, chunk, &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    let perm = derangement(eval.len(), chunk, 2);
    let shuffled = model.reconstruct_permuted(&eval.images, 1, chunk, &perm, &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    let matched = evalkit::psnr(&eval.images, &recon).map_err(err)?;
    let mismatched = evalkit::psnr(&eval.images, &shuffled).map_err(err)?;
    let detail = format!(
        "flow MA {early:.4} -> {late:.4} (ratio {:.3}), PSNR matched {matched:.2} dB vs shuffled {mismatched:.2} dB, {} steps in {:.0}s",
        late / early,
        TOY_STEPS,
        elapsed.as_secs_f64()
    );
    check(late <= TOY_LOSS_RATIO * early, format!("loss did not halve: {detail}"))?;
    check(matched - mismatched >= TOY_PSNR_GAP_DB, format!("conditions too weak: {detail}"))?;
    check(elapsed <= TOY_BUDGET, format!("over the 30 min budget: {detail}"))?;
    Ok(detail)
}

fn train_and_measure(cfg: &RunConfig, train: &Dataset, eval: &Dataset) -> Result<(f64, f64, f64), String> {
    let out = train_loop(cfg, train, LoopOptions::default()).map_err(err)?;
    let model = &out.state.model;
    let recon = model.reconstruct(&eval.images, 1, 64, &mut ChaCha8Rng::seed_from_u64(1)).map_err(err)?;
    let mse = evalkit::mse(&eval.images, &recon).map_err(err)?;
    let seams = evalkit::seam_energy(&recon, cfg.patch_size).map_err(err)?;
    let (s, t) = model.final_features(&eval.images).map_err(err)?;
    let alignment = evalkit::teacher_alignment(s.final_layer().view(), t.final_layer().view()).map_err(err)?;
    Ok((alignment, mse, seams))
}

fn loss_balance() -> Verdict {
    let (train, eval) = toy_data();
    let base = toy_config(ABLATION_STEPS);
    let run = |d: f64, f: f64| train_and_measure(&RunConfig { lambda_d: d, lambda_f: f, ..base.clone() }, &train, &eval);
    let (align_joint, mse_joint, _) = run(1.0, 1.0)?;
    let (align_flow, _, _) = run(0.0, 1.0)?;
    let (_, mse_dist, _) = run(1.0, 0.0)?;
    let detail = format!(
        "{ABLATION_STEPS} steps: alignment 1:1 {align_joint:.4} vs 0:1 {align_flow:.4}; recon MSE 1:1 {mse_joint:.4} vs 1:0 {mse_dist:.4}"
    );
    check(align_joint > align_flow, format!("alignment direction: {detail}"))?;
    check(mse_joint < mse_dist, format!("reconstruction direction: {detail}"))?;
    Ok(detail)
}

fn gtb_seams() -> Verdict {
    let (train, eval) = toy_data();
    let base = toy_config(ABLATION_STEPS);
    let (_, _, local) = train_and_measure(&RunConfig { gtb_depth: 0, ..base.clone() }, &train, &eval)?;
    let (_, _, global) = train_and_measure(&RunConfig { gtb_depth: 2, ..base }, &train, &eval)?;
    let detail = format!("{ABLATION_STEPS} steps: seam energy K=0 {local:.5} vs K=2 {global:.5}");
    check(local > global, detail.clone())?;
    Ok(detail)
}

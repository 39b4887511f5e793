use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uniflow::data::synth;
use uniflow::encoder::LatentCode;
use uniflow::evalkit::frechet_distance;
use uniflow::flowdec::{flow_loss_with, patchify, unpatchify, FlowNoise};
use uniflow::nn::{Param, Params};
use uniflow::trainer::{train_loop, LoopOptions, Model};
use uniflow::{Checkpoint, RunConfig, TimestepDistribution};

fn small() -> RunConfig {
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
        checkpoint_every: 0,
        ..RunConfig::toy()
    }
}

#[test]
fn zero_predictor_on_zero_images_costs_one() {
    let rows = 1 << 14;
    let x = Array2::<f64>::zeros((rows, 64));
    let noise = FlowNoise::<f64>::sample(rows, 1, 64, TimestepDistribution::Uniform, &mut ChaCha8Rng::seed_from_u64(0));
    let loss = flow_loss_with(x.view(), &noise, 1, |xt, _| Ok(Array2::zeros(xt.raw_dim()))).unwrap();
    assert!((loss - 1.0).abs() < 1e-2, "{loss}");
}

#[test]
fn zero_latent_gives_input_independent_conditions() {
    let cfg = RunConfig { image_size: 12, ..small() };
    let mut model = Model::<f64>::new(&cfg, None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    model.decoder.p_up.bias.value.fill(0.0);
    let zero = LatentCode { z: Array2::zeros((9, 4)), batch: 1, grid: 3 };
    let (a, _) = model.decoder.lift_and_globalize(&zero).unwrap();
    let mut other = model.clone();
    other.student.patch_embed.weight.value.mapv_inplace(|v| v * 3.0);
    let (b, _) = other.decoder.lift_and_globalize(&zero).unwrap();
    assert_eq!(a.c, b.c);
}

#[test]
fn same_seed_gives_identical_step_records() {
    let cfg = RunConfig { epochs: 3, ..small() };
    let data = synth::generate(8, 8, 3);
    let a = train_loop(&cfg, &data, LoopOptions::default()).unwrap();
    let b = train_loop(&cfg, &data, LoopOptions::default()).unwrap();
    assert_eq!(a.records.len(), 6);
    assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.same_trajectory(y)));
    let c = train_loop(&RunConfig { seed: 1, ..cfg }, &data, LoopOptions::default()).unwrap();
    assert!(!a.records[0].same_trajectory(&c.records[0]));
}

#[test]
fn teacher_stays_frozen_through_training() {
    let cfg = RunConfig { epochs: 100, max_steps: 100, ..small() };
    let data = synth::generate(8, 8, 4);
    let before = Model::<f32>::new(&cfg, None, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    let out = train_loop(&cfg, &data, LoopOptions::default()).unwrap();
    assert_eq!(out.records.len(), 100);
    assert_eq!(out.state.model.teacher(), before.teacher());
    assert_ne!(out.state.model.student, before.student);
}

#[test]
fn pretrained_teacher_seeds_the_student() {
    let cfg = RunConfig { teacher_source: uniflow::TeacherSource::PretrainedProbeTeacher, teacher_pretrain_steps: 5, ..small() };
    let data = synth::generate(8, 8, 5);
    let model = Model::<f32>::new(&cfg, Some(&data), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(&model.student.clone().frozen(), model.teacher());
    assert!(model.teacher().is_frozen() && !model.student.is_frozen());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn patchify_round_trips(batch in 1usize..4, grid in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let size = grid * p;
        let data = ndarray::Array4::from_shape_simple_fn((batch, 3, size, size), {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            move || rand::Rng::random_range(&mut rng, -1.0f32..1.0)
        });
        let patches: Array2<f32> = patchify(data.view(), p).unwrap();
        prop_assert_eq!(patches.shape(), &[batch * grid * grid, p * p * 3]);
        prop_assert_eq!(unpatchify(patches.view(), batch, size, size, p).unwrap(), data);
    }

    #[test]
    fn config_text_round_trips(beta in 0.0f64..8.0, ld in 0.0f64..4.0, lr in 1e-6f64..1e-2, k in 0usize..8, seed in any::<u64>()) {
        let cfg = RunConfig { beta, lambda_d: ld, lambda_f: 1.0, learning_rate: lr, gtb_depth: k, seed, ..RunConfig::toy() };
        prop_assert_eq!(RunConfig::parse(&cfg.to_text(), "mem").unwrap(), cfg);
    }

    #[test]
    fn checkpoint_bytes_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ckpt = Checkpoint::new(small(), seed % 1000);
        let a = Param::<f32>::normal(rows, cols, 1.0, &mut rng).value;
        let b = Param::<f64>::normal(cols, rows, 1.0, &mut rng).value;
        ckpt.insert("a", &a);
        ckpt.insert("b", &b);
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        prop_assert_eq!(back.get::<f32>("a").unwrap(), a);
        prop_assert_eq!(back.get::<f64>("b").unwrap(), b);
        prop_assert_eq!(back.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), shift in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Param::<f64>::normal(40, 3, 1.0, &mut rng).value;
        let b = Param::<f64>::normal(40, 3, 1.5, &mut rng).value + shift;
        let ab = frechet_distance(a.view(), b.view()).unwrap();
        let ba = frechet_distance(b.view(), a.view()).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
    }

    #[test]
    fn flow_gradient_reaches_the_decoder(seed in 0u64..1000) {
        let cfg = RunConfig { lambda_d: 0.0, lambda_f: 1.0, ..small() };
        let data = synth::generate(4, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Model::<f64>::new(&cfg, None, &mut rng).unwrap();
        let noise = FlowNoise::sample(4, cfg.seq_len(), cfg.patch_dim(), cfg.timestep_distribution, &mut rng);
        model.zero_grad();
        model.forward_backward(&data.images, &noise, &cfg).unwrap();
        let decoder_norm: f64 = model.decoder.params("").iter().flat_map(|(_, p)| p.grad.iter().map(|g| g * g)).sum();
        prop_assert!(decoder_norm > 0.0);
    }
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let toy = uniflow::load_config(dir.join("toy.conf")).unwrap();
    assert_eq!(RunConfig { epochs: 30, max_steps: 0, ..toy }, RunConfig::toy());
    let paper = uniflow::load_config(dir.join("paper_scale.conf")).unwrap();
    assert_eq!(paper, RunConfig { teacher_source: uniflow::TeacherSource::PretrainedProbeTeacher, ..RunConfig::paper_scale() });
}

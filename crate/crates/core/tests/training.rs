use std::collections::BTreeSet;

use avlae::data::{decode_checkpoint, encode_checkpoint, make_synthetic, Dataset, SyntheticSpec};
use avlae::networks::{ModelConfig, NetworkId};
use avlae::tensor::{Graph, Real, Tensor};
use avlae::training::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use NetworkId::*;

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::tiny(),
        batch: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn tiny_data(n: usize) -> Dataset {
    make_synthetic(&SyntheticSpec {
        n_videos: n,
        frames: 2,
        height: 8,
        width: 8,
        object_size: 3,
        speeds: vec![1, 2],
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn naive_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ------------------------------------------------------------ losses

#[test]
fn adversarial_terms_match_naive_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let real = Tensor::<f64>::randn(&[6, 1], &mut rng);
        let fake = Tensor::<f64>::randn(&[6, 1], &mut rng);
        let mut g = Graph::new();
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let terms = adversarial_terms(&mut g, r, f).unwrap();
        let sat = generator_objective(&mut g, f, GenLoss::Saturating);
        let ns = generator_objective(&mut g, f, GenLoss::NonSaturating);

        let log_real: Vec<f64> = real.data().iter().map(|&x| naive_sigmoid(x).ln()).collect();
        let log_fake: Vec<f64> = fake.data().iter().map(|&x| (1.0 - naive_sigmoid(x)).ln()).collect();
        let log_d_fake: Vec<f64> = fake.data().iter().map(|&x| naive_sigmoid(x).ln()).collect();
        let disc = mean(&log_real) + mean(&log_fake);
        assert!((g.value(terms.disc).item() - disc).abs() < 1e-6);
        assert!((g.value(terms.gen).item() - mean(&log_fake)).abs() < 1e-6);
        assert!((g.value(sat).item() - mean(&log_fake)).abs() < 1e-6);
        assert!((g.value(ns).item() + mean(&log_d_fake)).abs() < 1e-6);
    }
}

#[test]
fn zero_logits_give_two_log_half() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros(&[4, 1]));
    let t = adversarial_terms(&mut g, z, z).unwrap();
    assert!((g.value(t.disc).item() - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    assert!((g.value(t.disc).item() + 1.3863).abs() < 1e-4);
}

#[test]
fn perfect_discriminator_limit_is_finite_and_near_zero() {
    let mut g = Graph::<f64>::new();
    let r = g.constant(Tensor::full(&[2, 1], 800.0));
    let f = g.constant(Tensor::full(&[2, 1], -800.0));
    let t = adversarial_terms(&mut g, r, f).unwrap();
    let v = g.value(t.disc).item();
    assert!(v <= 0.0 && v > -1e-12, "{v}");
}

#[test]
fn adversarial_losses_through_networks_match_naive_formula() {
    let cfg = ModelConfig::tiny();
    let model = avlae::networks::Avlae::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let real = Tensor::<f64>::uniform(&[3, 3, 2, 8, 8], 1.0, &mut rng);
    let fake = Tensor::<f64>::uniform(&[3, 3, 2, 8, 8], 1.0, &mut rng);
    let mut g = Graph::new();
    let b = model.bind(&mut g, &[]);
    let xr = g.constant(real);
    let xf = g.constant(fake);
    let video = loss_adv_video(&mut g, &model, &b, xr, xf).unwrap();
    let lr = model.disc_video_full(&mut g, &b, xr).unwrap();
    let lf = model.disc_video_full(&mut g, &b, xf).unwrap();
    let naive = mean(&g.value(lr).data().iter().map(|&x| naive_sigmoid(x).ln()).collect::<Vec<_>>())
        + mean(&g.value(lf).data().iter().map(|&x| (1.0 - naive_sigmoid(x)).ln()).collect::<Vec<_>>());
    assert!((g.value(video.disc).item() - naive).abs() < 1e-6);

    let fr = g.slice(xr, 2, 1, 1).unwrap();
    let ff = g.slice(xf, 2, 0, 1).unwrap();
    let image = loss_adv_image(&mut g, &model, &b, fr, ff).unwrap();
    let wr = model.encode_appearance(&mut g, &b, fr).unwrap();
    let wf = model.encode_appearance(&mut g, &b, ff).unwrap();
    let dr = model.disc_image(&mut g, &b, wr).unwrap();
    let df = model.disc_image(&mut g, &b, wf).unwrap();
    let naive = mean(&g.value(dr).data().iter().map(|&x| naive_sigmoid(x).ln()).collect::<Vec<_>>())
        + mean(&g.value(df).data().iter().map(|&x| (1.0 - naive_sigmoid(x)).ln()).collect::<Vec<_>>());
    assert!((g.value(image.disc).item() - naive).abs() < 1e-6);
}

#[test]
fn unit_offsets_in_four_dimensions_cost_four() {
    let mut g = Graph::<f64>::new();
    let w_m = g.constant(Tensor::new(&[1, 4], vec![0.3, -1.2, 2.0, 0.0]).unwrap());
    let enc = g.constant(Tensor::new(&[1, 4], vec![1.3, -0.2, 3.0, 1.0]).unwrap());
    let w_a = g.constant(Tensor::new(&[1, 4], vec![5.0; 4]).unwrap());
    let t = reconstruction_terms(&mut g, w_m, Some(enc), w_a, Some(w_m), 1.0, 0.0, RecNorm::SquaredL2).unwrap();
    assert_eq!(g.value(t.total).item(), 4.0);
    assert!(t.appearance.is_none());

    let t = reconstruction_terms(&mut g, w_m, Some(w_m), w_a, Some(w_a), 1.0, 1.0, RecNorm::SquaredL2).unwrap();
    assert_eq!(g.value(t.total).item(), 0.0);

    let t = reconstruction_terms(&mut g, w_m, Some(enc), w_a, None, 2.0, 1.0, RecNorm::L1).unwrap();
    assert!((g.value(t.total).item() - 8.0).abs() < 1e-12);
}

#[test]
fn reconstruction_averages_over_the_batch() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::new(&[2, 3], vec![1.0, 1.0, 1.0, 2.0, 0.0, 0.0]).unwrap());
    let d = latent_distance(&mut g, a, b, RecNorm::SquaredL2).unwrap();
    assert_eq!(g.value(d).item(), (3.0 + 4.0) / 2.0);
}

// ------------------------------------------------------------ partition contract

const UPDATED: [(Phase, &[NetworkId]); 3] = [
    (Phase::Discriminators, &[EncodeAppearance, EncodeMotion, DiscImage, DiscVideo]),
    (Phase::Generator, &[MapAppearance, MapMotion, Generator]),
    (Phase::LatentRecon, &[EncodeAppearance, EncodeMotion, Generator]),
];

fn assert_partition<R: Real>(before: &Trainer<R>, after: &Trainer<R>, report: &StepReport) {
    let set = UPDATED.iter().find(|(p, _)| *p == report.phase).unwrap().1;
    for id in NetworkId::ALL {
        let same = before.model().params(id) == after.model().params(id);
        let delta = report.delta_norms[id.name()];
        if set.contains(&id) {
            assert!(!same && delta > 0.0, "step {}: {id} did not change", report.phase);
        } else {
            assert!(same && delta == 0.0, "step {}: {id} changed", report.phase);
        }
    }
    // The flow solver is configuration only; it must be untouched.
    assert_eq!(before.model().config(), after.model().config());
}

#[test]
fn each_step_updates_exactly_its_networks() {
    let data = tiny_data(12);
    let mut tr: Trainer<f32> = Trainer::new(tiny_config(4)).unwrap();
    for i in 0..5 {
        let real = data.batch(&[i, i + 1, i + 2]);
        let before = tr.clone();
        let r = tr.step_discriminators(&real).unwrap();
        assert_partition(&before, &tr, &r);
        let before = tr.clone();
        let r = tr.step_generator().unwrap();
        assert_partition(&before, &tr, &r);
        let before = tr.clone();
        let r = tr.step_latent_recon().unwrap();
        assert_partition(&before, &tr, &r);
    }
}

#[test]
fn discriminator_step_uses_two_optimizer_groups() {
    let data = tiny_data(6);
    let mut tr: Trainer<f32> = Trainer::new(tiny_config(0)).unwrap();
    tr.step_discriminators(&data.batch(&[0, 1, 2])).unwrap();
    let t: Vec<u64> = (0..4).map(|i| tr.optimizer(i).t).collect();
    assert_eq!(t, vec![1, 1, 0, 0]);
    tr.step_generator().unwrap();
    tr.step_latent_recon().unwrap();
    let t: Vec<u64> = (0..4).map(|i| tr.optimizer(i).t).collect();
    assert_eq!(t, vec![1, 1, 1, 1]);
    assert_eq!(GROUPS[0].0, "disc_video");
}

#[test]
fn zero_reconstruction_weights_make_step_three_a_no_op() {
    let cfg = TrainConfig {
        k1: 0.0,
        k2: 0.0,
        ..tiny_config(2)
    };
    let mut tr: Trainer<f32> = Trainer::new(cfg).unwrap();
    let before = tr.model().clone();
    let r = tr.step_latent_recon().unwrap();
    assert_eq!(r.losses["L_rec"], 0.0);
    assert!(r.delta_norms.values().all(|&d| d == 0.0));
    assert_eq!(before.all_params(), tr.model().all_params());
}

#[test]
fn generator_step_reaches_all_generator_networks() {
    for seed in 0..4 {
        let mut tr: Trainer<f32> = Trainer::new(TrainConfig {
            seed,
            ..TrainConfig::desk()
        })
        .unwrap();
        let r = tr.step_generator().unwrap();
        for id in [MapAppearance, MapMotion, Generator] {
            assert!(r.delta_norms[id.name()] > 0.0, "seed {seed}: {id}");
        }
    }
}

// ------------------------------------------------------------ sign coherence

/// Runs `step` on a copy of `tr`, then re-runs it from the same random state
/// with the updated parameters; returns the objective before and after.
fn objective_change<F>(tr: &Trainer<f64>, key: &str, step: F) -> (f64, f64)
where
    F: Fn(&mut Trainer<f64>) -> StepReport,
{
    let mut first = tr.clone();
    let before = step(&mut first).losses[key];
    let mut again = tr.clone();
    *again.model_mut() = first.model().clone();
    let after = step(&mut again).losses[key];
    (before, after)
}

#[test]
fn isolated_steps_improve_their_objectives() {
    let data = tiny_data(9);
    for seed in 0..4 {
        let tr: Trainer<f64> = Trainer::new(tiny_config(seed)).unwrap();
        let real: Tensor<f64> = data.batch(&[0, 4, 8]).cast();
        let (b, a) = objective_change(&tr, "objective", |t| t.step_discriminators(&real).unwrap());
        assert!(a < b, "step I, seed {seed}: {b} -> {a}");
        let (b, a) = objective_change(&tr, "objective", |t| t.step_generator().unwrap());
        assert!(a < b, "step II, seed {seed}: {b} -> {a}");
        let (b, a) = objective_change(&tr, "L_rec", |t| t.step_latent_recon().unwrap());
        assert!(a < b, "step III, seed {seed}: {b} -> {a}");
    }
}

#[test]
fn latent_reconstruction_decreases_on_a_fixed_batch() {
    let mut tr: Trainer<f32> = Trainer::new(TrainConfig::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z_a = Tensor::randn(&[8, 32], &mut rng);
    let z_m = Tensor::randn(&[8, 32], &mut rng);
    let frames = [0, 1, 2, 3, 4, 5, 6, 7];
    let mut last = tr.eval_latent_recon(&z_a, &z_m, &frames).unwrap();
    for i in 0..50 {
        tr.step_latent_recon_on(&z_a, &z_m, &frames).unwrap();
        let now = tr.eval_latent_recon(&z_a, &z_m, &frames).unwrap();
        assert!(now < last, "iteration {i}: {last} -> {now}");
        last = now;
    }
}

// ------------------------------------------------------------ runs

fn run_reports(cfg: &TrainConfig, data: &Dataset, steps: u64) -> Vec<StepReport> {
    let mut reports: Vec<StepReport> = Vec::new();
    let mut tr: Trainer<f32> = Trainer::new(cfg.clone()).unwrap();
    tr.run(data, steps, &mut reports).unwrap();
    reports.iter().map(StepReport::untimed).collect()
}

#[test]
fn identical_seeds_give_identical_report_streams() {
    let data = tiny_data(10);
    let cfg = tiny_config(11);
    let a = run_reports(&cfg, &data, 10);
    let b = run_reports(&cfg, &data, 10);
    assert_eq!(a.len(), 30);
    assert_eq!(a, b);
    assert!(a.iter().all(StepReport::is_finite));
    let c = run_reports(&tiny_config(12), &data, 10);
    assert_ne!(a, c);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = tiny_data(7);
    let cfg = tiny_config(5);
    let straight = run_reports(&cfg, &data, 10);

    let mut first: Vec<StepReport> = Vec::new();
    let mut tr: Trainer<f32> = Trainer::new(cfg.clone()).unwrap();
    tr.run(&data, 5, &mut first).unwrap();
    let bytes = encode_checkpoint(&tr.to_checkpoint());
    let ckpt = decode_checkpoint(&bytes).unwrap();
    let mut resumed: Trainer<f32> = Trainer::from_checkpoint(cfg.clone(), &ckpt, false).unwrap();
    assert_eq!(resumed.step(), 5);
    let mut second: Vec<StepReport> = Vec::new();
    resumed.run(&data, 5, &mut second).unwrap();

    let joined: Vec<StepReport> = first.iter().chain(&second).map(StepReport::untimed).collect();
    assert_eq!(joined, straight);

    let mut uninterrupted: Trainer<f32> = Trainer::new(cfg).unwrap();
    uninterrupted.run(&data, 10, &mut ()).unwrap();
    assert_eq!(encode_checkpoint(&resumed.to_checkpoint()), encode_checkpoint(&uninterrupted.to_checkpoint()));
}

#[test]
fn checkpoints_refuse_other_configs_unless_forced() {
    let cfg = tiny_config(1);
    let tr: Trainer<f32> = Trainer::new(cfg.clone()).unwrap();
    let ckpt = tr.to_checkpoint();
    let other = TrainConfig {
        seed: 2,
        ..cfg.clone()
    };
    assert!(matches!(
        Trainer::<f32>::from_checkpoint(other.clone(), &ckpt, false),
        Err(TrainError::Data(avlae::data::DataError::Fingerprint { .. }))
    ));
    assert!(Trainer::<f32>::from_checkpoint(other, &ckpt, true).is_ok());

    let mut partial = ckpt.clone();
    let removed = partial.tensors.remove(3).0;
    match Trainer::<f32>::from_checkpoint(cfg, &partial, false) {
        Err(TrainError::Data(avlae::data::DataError::MissingTensor(n))) => assert_eq!(n, removed),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_names_cover_parameters_and_moments() {
    let tr: Trainer<f32> = Trainer::new(tiny_config(0)).unwrap();
    let ckpt = tr.to_checkpoint();
    let names: BTreeSet<&str> = ckpt.names().collect();
    assert_eq!(names.len(), ckpt.tensors.len());
    let params: usize = tr.model().all_params().iter().map(|p| p.len()).sum();
    let moments: usize = GROUPS
        .iter()
        .map(|(_, ids)| ids.iter().map(|&id| tr.model().params(id).len()).sum::<usize>())
        .sum();
    assert_eq!(names.len(), params + 2 * moments + GROUPS.len());
    assert!(names.contains("adam/latent/t"));
}

#[test]
fn non_finite_losses_abort_with_diagnostics() {
    let mut tr: Trainer<f32> = Trainer::new(tiny_config(0)).unwrap();
    tr.model_mut().params_mut(DiscImage).tensors_mut()[0].data_mut()[0] = f32::NAN;
    let before = tr.model().clone();
    match tr.step_generator() {
        Err(TrainError::NonFinite { step, phase, losses }) => {
            assert_eq!(step, 1);
            assert_eq!(phase, Phase::Generator);
            assert!(losses["L_I_gen"].is_nan());
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    // NaN never compares equal, so compare bit patterns.
    let bits = |m: &avlae::networks::Avlae<f32>| -> Vec<u32> {
        m.all_params().iter().flat_map(|p| p.tensors().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits()))).collect()
    };
    assert_eq!(bits(&before), bits(tr.model()));
}

#[test]
fn ablation_variants_train() {
    let data = tiny_data(6);
    let variants = [
        (0.0, 1.0, true),
        (1.0, 0.0, true),
        (0.0, 0.0, true),
        (0.0, 1.0, false),
    ];
    for (k1, k2, motion) in variants {
        let mut cfg = tiny_config(3);
        cfg.k1 = k1;
        cfg.k2 = k2;
        cfg.model.use_motion_encoder = motion;
        let mut reports: Vec<StepReport> = Vec::new();
        let mut tr: Trainer<f32> = Trainer::new(cfg).unwrap();
        tr.run(&data, 2, &mut reports).unwrap();
        assert!(reports.iter().all(StepReport::is_finite));
        let rec = &reports[2];
        assert_eq!(rec.losses["L_rec_motion"] == 0.0, k1 == 0.0);
        assert_eq!(rec.losses["L_rec_appearance"] == 0.0, k2 == 0.0);
        if !motion {
            assert!(tr.model().params(EncodeMotion).is_empty());
        }
    }
    let bad = TrainConfig {
        model: ModelConfig {
            use_motion_encoder: false,
            ..ModelConfig::tiny()
        },
        ..tiny_config(0)
    };
    assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!((c.adam.alpha, c.adam.beta1, c.adam.beta2), (2e-4, 0.5, 0.999));
    assert_eq!((c.k1, c.k2), (1.0, 1.0));
    assert_eq!(c.model.latent_dim, 128);
    assert_eq!(c.model.frames, 16);
    for bad in [
        TrainConfig { k1: -1.0, ..c.clone() },
        TrainConfig { batch: 0, ..c.clone() },
        TrainConfig { log_every: 0, ..c.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert!(serde_json::from_str::<TrainConfig>(r#"{"k3": 1.0}"#).is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"k1": 0.0, "batch": 4}"#).unwrap();
    assert_eq!((parsed.k1, parsed.batch, parsed.k2), (0.0, 4, 1.0));

    let longer = TrainConfig { steps: 10, log_every: 5, ..c.clone() };
    assert_eq!(longer.fingerprint(), c.fingerprint());
    assert_ne!(TrainConfig { seed: 1, ..c.clone() }.fingerprint(), c.fingerprint());
}

#[test]
fn dataset_geometry_must_match() {
    let mut tr: Trainer<f32> = Trainer::new(TrainConfig::desk()).unwrap();
    assert!(matches!(tr.iteration(&tiny_data(3)), Err(TrainError::Geometry { .. })));
    let empty = tiny_data(3).split_at(0).0;
    assert!(matches!(tr.iteration(&empty), Err(TrainError::EmptyDataset)));
}

#[test]
fn sampler_visits_every_video_once_per_epoch() {
    let mut s = Sampler::new(9, 10);
    let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_eq!(s.epoch(), 0);
    let next = s.next_batch(3);
    assert_eq!(s.epoch(), 1);
    let mut again = Sampler::at(9, 10, 1, 0);
    assert_eq!(again.next_batch(3), next);
}

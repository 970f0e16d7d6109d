use super::*;
use crate::data::Dataset;
use crate::data::Split;
use proptest::prelude::*;

fn micro_arch() -> ArchConfig {
    ArchConfig {
        conv_widths: [2, 3],
        fc_width: 8,
        critic_width: 8,
        ..ArchConfig::tiny(8)
    }
}

fn micro_latent() -> LatentConfig {
    LatentConfig {
        kc: 3,
        ks: 2,
        kn: 2,
        ..LatentConfig::default()
    }
}

fn toy_data(n: usize, side: usize) -> Dataset {
    let pixels = (0..n * side * side).map(|i| ((i * 37 + i / 5) % 256) as u8).collect();
    let labels = (0..n).map(|i| (i % 3) as u8).collect();
    Dataset::new("toy", Split::Train, side, side, pixels, labels).unwrap()
}

fn cfg(model: ModelKind) -> TrainConfig {
    TrainConfig {
        model,
        epochs: 1,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn batch(n: usize) -> Tensor<f64> {
    ImageSource::<f64>::images(&toy_data(n, 8), &(0..n).collect::<Vec<_>>())
}

#[test]
fn schedule_interleaves_one_x_step_per_cycle() {
    let phases: Vec<Phase> = (0..12).map(|s| phase_at(ModelKind::RepGan, 5, s)).collect();
    assert_eq!(phases[0], Phase::XRepX);
    assert_eq!(phases[6], Phase::XRepX);
    assert!(phases[1..6].iter().all(|p| *p == Phase::RepXRep));
    assert!((0..50).all(|s| phase_at(ModelKind::XRepX, 5, s) == Phase::XRepX));
    assert!((0..50).all(|s| phase_at(ModelKind::RepXRep, 5, s) == Phase::RepXRep));
}

proptest! {
    #[test]
    fn schedule_ratio(steps in 1u64..2000, mult in 1usize..9) {
        let x = (0..steps).filter(|&s| phase_at(ModelKind::RepGan, mult, s) == Phase::XRepX).count() as i64;
        let rep = steps as i64 - x;
        prop_assert!((rep - mult as i64 * x).abs() <= mult as i64);
    }
}

#[test]
fn presets_and_overrides() {
    let mut c = TrainConfig::default();
    assert_eq!(c.learning_rates(), LearningRates::MNIST);
    c.dataset = DatasetName::FashionMnist;
    assert_eq!(c.learning_rates(), LearningRates::FASHION_MNIST);
    c.lr_dx = Some(0.5);
    assert_eq!(c.learning_rates().dx, 0.5);
    assert_eq!(c.learning_rates().generators, 5e-5);
    assert!(c.validate().is_ok());

    for bad in [
        TrainConfig { batch_size: 1, ..TrainConfig::default() },
        TrainConfig { rep_phase_multiplier: 0, ..TrainConfig::default() },
        TrainConfig { lr_dz: Some(0.0), ..TrainConfig::default() },
        TrainConfig { clip: -1.0, ..TrainConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!(ModelKind::parse("Rep-x-Rep"), Some(ModelKind::RepXRep));
    assert_eq!(ModelKind::parse("gan"), None);
}

#[test]
fn x_phase_leaves_image_discriminator_alone() {
    let c = cfg(ModelKind::RepGan);
    let mut st: TrainState<f64> = TrainState::new(&c, &micro_arch(), &micro_latent()).unwrap();
    let dx = st.params.disc_x.checksum();
    let critics = st.params.critics_checksum();
    let enc = st.params.encoder.checksum();
    let dec = st.params.decoder.checksum();
    let r = st.x_rep_x_step(&c, &batch(4)).unwrap();
    assert_eq!(st.params.disc_x.checksum(), dx);
    assert_ne!(st.params.critics_checksum(), critics);
    assert_ne!(st.params.encoder.checksum(), enc);
    assert_ne!(st.params.decoder.checksum(), dec);
    assert!(r.rec_x > 0.0 && r.adv_c != 0.0 && r.adv_s != 0.0 && r.adv_n != 0.0);
    assert_eq!((r.adv_x, r.rec_c, r.rec_s), (0.0, 0.0, 0.0));
    assert_eq!(st.opt_dx.steps(), 0);
    // one critic step per slot
    assert_eq!(st.opt_dz.steps(), 3);
    for sc in &st.params.critics {
        for p in sc.critic.params() {
            assert!(p.value.data().iter().all(|w| w.abs() <= c.clip));
        }
    }
}

#[test]
fn rep_phase_leaves_latent_critics_alone() {
    let c = cfg(ModelKind::RepGan);
    let mut st: TrainState<f64> = TrainState::new(&c, &micro_arch(), &micro_latent()).unwrap();
    let critics = st.params.critics_checksum();
    let dx = st.params.disc_x.checksum();
    let r = st.rep_x_rep_step(&c, &batch(4)).unwrap();
    assert_eq!(st.params.critics_checksum(), critics);
    assert_ne!(st.params.disc_x.checksum(), dx);
    assert_eq!(st.opt_dz.steps(), 0);
    assert!(r.adv_x > 0.0 && r.rec_c > 0.0 && r.rec_s.is_finite());
    assert_eq!((r.adv_c, r.adv_s, r.adv_n, r.rec_x), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn isolation_holds_over_a_short_run() {
    let c = TrainConfig {
        max_steps: Some(20),
        epochs: 10,
        ..cfg(ModelKind::RepGan)
    };
    let data = toy_data(16, 8);
    let mut st: TrainState<f64> = TrainState::new(&c, &micro_arch(), &micro_latent()).unwrap();
    let mut hist = History::default();
    let mut prev = (st.params.critics_checksum(), st.params.disc_x.checksum());
    while st.step < 20 {
        let step_cfg = TrainConfig {
            max_steps: Some(st.step + 1),
            ..c.clone()
        };
        run(&mut st, &step_cfg, &data, &mut hist).unwrap();
        let now = (st.params.critics_checksum(), st.params.disc_x.checksum());
        match hist.reports.last().unwrap().phase {
            Phase::XRepX => assert_eq!(now.1, prev.1),
            Phase::RepXRep => assert_eq!(now.0, prev.0),
        }
        prev = now;
    }
    assert_eq!(hist.count(Phase::XRepX), 4);
    assert_eq!(hist.count(Phase::RepXRep), 16);
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let c = TrainConfig {
        epochs: 2,
        ..cfg(ModelKind::RepGan)
    };
    let data = toy_data(12, 8);
    let full: TrainState<f64> = train(&c, &micro_arch(), &micro_latent(), &data, &mut History::default()).unwrap();
    let again: TrainState<f64> = train(&c, &micro_arch(), &micro_latent(), &data, &mut History::default()).unwrap();
    assert_eq!(full.step, 6);
    assert_eq!(full.params.checksum(), again.params.checksum());

    // stop mid-epoch, then continue from a clone
    let mut part: TrainState<f64> = TrainState::new(&c, &micro_arch(), &micro_latent()).unwrap();
    let mut hist = History::default();
    run(&mut part, &TrainConfig { max_steps: Some(4), ..c.clone() }, &data, &mut hist).unwrap();
    assert_eq!((part.step, part.epoch, part.batch_in_epoch), (4, 1, 1));
    let mut resumed = part.clone();
    run(&mut resumed, &c, &data, &mut hist).unwrap();
    assert_eq!(resumed.params.checksum(), full.params.checksum());
    assert_eq!(resumed.rng.state(), full.rng.state());
    assert_eq!(hist.reports.len(), 6);
}

#[test]
fn ablations_run_only_their_phase() {
    let data = toy_data(12, 8);
    for (model, phase) in [(ModelKind::XRepX, Phase::XRepX), (ModelKind::RepXRep, Phase::RepXRep)] {
        let mut hist = History::default();
        let st: TrainState<f64> = train(&cfg(model), &micro_arch(), &micro_latent(), &data, &mut hist).unwrap();
        assert_eq!(hist.reports.len(), 3);
        assert!(hist.reports.iter().all(|r| r.phase == phase));
        if model == ModelKind::XRepX {
            assert_eq!(st.opt_dx.steps(), 0);
        } else {
            assert_eq!(st.opt_dz.steps(), 0);
        }
    }
}

#[test]
fn labels_never_reach_training() {
    let c = cfg(ModelKind::RepGan);
    let data = toy_data(12, 8);
    let a: TrainState<f64> = train(&c, &micro_arch(), &micro_latent(), &data, &mut History::default()).unwrap();
    let b: TrainState<f64> = train(
        &c,
        &micro_arch(),
        &micro_latent(),
        &data.with_constant_labels(7),
        &mut History::default(),
    )
    .unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
}

struct Poisoned;

impl ImageSource<f64> for Poisoned {
    fn len(&self) -> usize {
        8
    }

    fn image_shape(&self) -> (usize, usize) {
        (1, 8)
    }

    fn images(&self, indices: &[usize]) -> Tensor<f64> {
        Tensor::full(vec![indices.len(), 1, 8, 8], f64::NAN)
    }
}

#[test]
fn non_finite_loss_aborts() {
    for model in [ModelKind::XRepX, ModelKind::RepXRep] {
        let err = train(&cfg(model), &micro_arch(), &micro_latent(), &Poisoned, &mut History::default()).unwrap_err();
        match err {
            Error::Divergence { step, phase, .. } => {
                assert_eq!(step, 0);
                assert_eq!(Phase::parse(&phase), Some(phase_at(model, 5, 0)));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}

#[test]
fn mismatched_data_is_rejected() {
    let c = cfg(ModelKind::RepGan);
    let err = train::<f64, _>(&c, &micro_arch(), &micro_latent(), &toy_data(12, 12), &mut History::default());
    assert!(matches!(err, Err(Error::Config(_))));
    let err = train::<f64, _>(&c, &micro_arch(), &micro_latent(), &toy_data(3, 8), &mut History::default());
    assert!(matches!(err, Err(Error::Config(_))));
    let mut st: TrainState<f64> = TrainState::new(&c, &micro_arch(), &micro_latent()).unwrap();
    assert!(st.train_step(&c, &Tensor::zeros(vec![4, 1, 4, 4])).is_err());
}

#[test]
fn entangled_variant_trains_at_every_width() {
    for dim in [2, 8, 16, 32, 64] {
        let mut hist = History::default();
        let st: TrainState<f64> =
            train_entangled(&cfg(ModelKind::RepGan), &micro_arch(), dim, 0.5, &toy_data(12, 8), &mut hist).unwrap();
        assert_eq!(st.params.critics.len(), 1);
        assert!(st.params.all_finite());
        let x = hist.reports.iter().find(|r| r.phase == Phase::XRepX).unwrap();
        assert!(x.adv_s != 0.0 && x.adv_c == 0.0 && x.adv_n == 0.0);
        let rep = hist.reports.iter().find(|r| r.phase == Phase::RepXRep).unwrap();
        assert!(rep.rec_s > 0.0 && rep.rec_c == 0.0);
    }
}

#[test]
fn checkpoint_cadence() {
    let c = TrainConfig {
        epochs: 2,
        checkpoint_every: 2,
        ..cfg(ModelKind::RepGan)
    };
    let mut hist = History::default();
    let _: TrainState<f64> = train(&c, &micro_arch(), &micro_latent(), &toy_data(12, 8), &mut hist).unwrap();
    assert_eq!(hist.checkpoints, vec![2, 4, 6, 6]);
}

#[test]
fn single_precision_steps() {
    let c = cfg(ModelKind::RepGan);
    let mut st: TrainState<f32> = TrainState::new(&c, &micro_arch(), &micro_latent()).unwrap();
    let x: Tensor<f32> = ImageSource::<f32>::images(&toy_data(4, 8), &[0, 1, 2, 3]);
    for _ in 0..3 {
        st.train_step(&c, &x).unwrap();
    }
    assert!(st.params.all_finite());
}

#[test]
fn prefetching_does_not_change_results() {
    let c = TrainConfig {
        epochs: 2,
        ..cfg(ModelKind::RepGan)
    };
    let data = toy_data(12, 8);
    let inline: TrainState<f64> = train(&c, &micro_arch(), &micro_latent(), &data, &mut History::default()).unwrap();
    let ahead = TrainConfig { prefetch: 2, ..c.clone() };
    let mut part: TrainState<f64> = TrainState::new(&ahead, &micro_arch(), &micro_latent()).unwrap();
    run(&mut part, &TrainConfig { max_steps: Some(2), ..ahead.clone() }, &data, &mut History::default()).unwrap();
    run(&mut part, &ahead, &data, &mut History::default()).unwrap();
    assert_eq!(part.params.checksum(), inline.params.checksum());
}

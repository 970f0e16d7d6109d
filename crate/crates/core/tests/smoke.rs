//! Short training runs on a fixed 256-image MNIST subset.

use std::path::PathBuf;

use repgan::data::{Dataset, Split};
use repgan::latent::LatentConfig;
use repgan::losses::Phase;
use repgan::networks::ArchConfig;
use repgan::training::{train, History, ModelKind, TrainConfig, TrainState};

fn fixture() -> Dataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    Dataset::from_idx_files(
        "mnist-256",
        Split::Train,
        &dir.join("mnist-256-images-idx3-ubyte.gz"),
        &dir.join("mnist-256-labels-idx1-ubyte.gz"),
    )
    .unwrap()
}

fn run(model: ModelKind, steps: u64, seed: u64) -> History {
    let cfg = TrainConfig {
        model,
        epochs: usize::MAX,
        max_steps: Some(steps),
        seed,
        ..TrainConfig::default()
    };
    let mut hist = History::default();
    let _: TrainState<f32> = train(&cfg, &ArchConfig::tiny(28), &LatentConfig::default(), &fixture(), &mut hist).unwrap();
    hist
}

fn rec_x(hist: &History) -> Vec<f64> {
    hist.reports.iter().filter(|r| r.phase == Phase::XRepX).map(|r| r.rec_x).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// The reconstruction properties count x-Rep-x steps, so they run the
// x-Rep-x schedule; under the hybrid schedule 500 global steps hold only
// 84 of them.
#[test]
fn reconstruction_error_falls() {
    let mut drops = Vec::new();
    for seed in [0, 1, 2] {
        let r = rec_x(&run(ModelKind::XRepX, 500, seed));
        assert_eq!(r.len(), 500);
        assert!(r.iter().all(|v| v.is_finite()));
        let start = r[0];
        let at_200 = mean(&r[196..200]);
        assert!(at_200 < start, "seed {seed}: rec_x {start} -> {at_200} after 200 steps");
        drops.push(1.0 - mean(&r[496..]) / start);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] >= 0.5, "median rec_x decrease {:.3} over 500 steps", drops[1]);
}

#[test]
fn category_recovery_beats_uniform() {
    let hist = run(ModelKind::RepGan, 500, 0);
    assert_eq!(hist.count(Phase::XRepX), 84);
    let rc: Vec<f64> = hist.reports.iter().filter(|r| r.phase == Phase::RepXRep).map(|r| r.rec_c).collect();
    let late = mean(&rc[rc.len() - 10..]);
    assert!(late < 10f64.ln(), "rec_c {late} after 500 steps");
}

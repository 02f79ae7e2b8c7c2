// Desk-scale training on the default synthetic world, then evaluation on
// the held-out route.
//
// `cargo run --release --example desk_training -- [seed] [loss_mode] [no_aug]`

use std::time::Instant;

use gsat::dataset::{generate_dataset, DatasetSpec, Split};
use gsat::eval::Metrics;
use gsat::geom::AugmentPolicy;
use gsat::losses::LossMode;
use gsat::trainer::{fit, split_dataset, Sample, TrainConfig};

#[derive(Debug, Clone, Copy)]
pub struct DeskRun {
    pub seed: u64,
    pub mode: LossMode,
    pub augment: bool,
    pub test: Metrics,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// One training run; the world and dataset are fixed, `seed` drives
/// initialization, the train/val split, shuffling, dropout and augmentation.
pub fn desk_run(seed: u64, mode: LossMode, augment: bool) -> DeskRun {
    let gen = generate_dataset(&DatasetSpec::default()).unwrap();
    let mut cfg = TrainConfig { loss_mode: mode, seed, ..Default::default() };
    cfg.network.init_seed = seed;
    cfg.augment.seed = seed;
    if !augment {
        cfg.augment = AugmentPolicy { seed, ..AugmentPolicy::identity() };
    }
    let ds = &gen.dataset;
    let samples = |split| -> Vec<Sample> {
        ds.split(split).into_iter().map(|s| Sample::from_scan(s, &cfg, &ds.anomalous_classes).unwrap()).collect()
    };
    let (pool, test) = (samples(Split::Train), samples(Split::Test));
    let (train, val) = split_dataset(&pool, cfg.split, seed).unwrap();

    let start = Instant::now();
    let result = fit(&train, &val, &cfg).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let test = Metrics::micro(&result.model.evaluate(&test).unwrap());
    let run = DeskRun { seed, mode, augment, test, best_epoch: result.model.best_epoch, seconds };
    println!(
        "seed {seed} {:<17} aug {:<5} P {:.4} R {:.4} F1 {:.4} best epoch {:>3} ({:.0}s)",
        mode.name(),
        augment,
        test.precision,
        test.recall,
        test.f1,
        run.best_epoch,
        seconds
    );
    run
}

pub fn run_example() -> DeskRun {
    let args: Vec<String> = std::env::args().collect();
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mode = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(LossMode::NormalAnomalous);
    let augment = args.get(3).map_or(true, |s| s != "no_aug");
    desk_run(seed, mode, augment)
}

#[allow(dead_code)]
fn main() {
    run_example();
}

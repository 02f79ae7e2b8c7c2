// The `gen`, `train`, `eval` and `map` commands end to end on a small
// synthetic dataset, training twice with one seed.

use std::fs;
use std::path::Path;

use gsat::checkpoint;
use gsat::cli::{cmd_eval, cmd_gen, cmd_map, cmd_train, RunConfig};

#[derive(Debug, Clone, Copy, Default)]
pub struct PipelineReport {
    pub identical_checkpoints: bool,
    pub identical_logs: bool,
    pub f1: f64,
    pub free_cells: usize,
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.set_seed(seed);
    cfg.dataset.scans = 8;
    cfg.dataset.test_scans = 2;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 3;
    cfg
}

pub fn run_in(dir: &Path) -> PipelineReport {
    let cfg = small_config(5);
    let data = dir.join("data");
    cmd_gen(&cfg, &data).unwrap();
    let (a, b) = (dir.join("a/model.gsck"), dir.join("b/model.gsck"));
    cmd_train(&cfg, &data, &a).unwrap();
    cmd_train(&cfg, &data, &b).unwrap();
    let read = |p: &Path| fs::read(p).unwrap();
    let mut rep = PipelineReport {
        identical_checkpoints: read(&a) == read(&b),
        identical_logs: read(&dir.join("a/model.log.csv")) == read(&dir.join("b/model.log.csv")),
        ..Default::default()
    };

    let summary = cmd_eval(&[a.clone()], &data, &dir.join("eval"), false).unwrap();
    rep.f1 = summary.mean_f1;

    let model = checkpoint::load(&a).unwrap();
    let scan = fs::read_dir(data.join("scans")).unwrap().filter_map(|e| e.ok()).map(|e| e.path()).find(|p| p.extension().is_some_and(|x| x == "ply")).unwrap();
    cmd_map(&model, &scan, &dir.join("map"), &cfg.map).unwrap();
    let pgm = fs::read(dir.join("map/costmap.pgm")).unwrap();
    rep.free_cells = pgm.iter().rev().take(cfg.map.grid.num_cells()).filter(|b| **b == gsat::mapper::PGM_FREE).count();
    println!("{rep:?}");
    rep
}

pub fn run_example() -> PipelineReport {
    let dir = tempfile::tempdir().unwrap();
    run_in(dir.path())
}

#[allow(dead_code)]
fn main() {
    run_example();
}

//! Run configuration and the `gen`, `train`, `eval` and `map` commands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bev::GridConfig;
use crate::checkpoint;
use crate::dataset::{generate_dataset, read_dataset, world_grid, write_generated, Dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::eval::Metrics;
use crate::geom::io::read_cloud;
use crate::losses::LossMode;
use crate::mapper::{infer_map, to_costmap, write_costmap, write_map_csv, MapOptions, DEFAULT_THRESHOLD};
use crate::synth::RobotProfile;
use crate::trainer::{fit, log_csv, split_dataset, FitResult, Sample, TrainConfig, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub grid: GridConfig,
    pub threshold: f64,
    pub anomaly_override: bool,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { grid: GridConfig::mapping(), threshold: DEFAULT_THRESHOLD, anomaly_override: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a command needs; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub map: MapConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        self.map.grid.validate()?;
        if !(0.0..=1.0).contains(&self.map.threshold) {
            return Err(Error::Config("map.threshold must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Sets every seed of the run from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.dataset.world.seed = seed;
        self.train.seed = seed;
        self.train.network.init_seed = seed;
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a synthetic dataset into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let gen = generate_dataset(&cfg.dataset)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = world_grid(&cfg.dataset.world, cfg.train.grid.resolution, cfg.train.grid.max_points);
    write_generated(&gen, out, &grid)?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    log::info!("wrote {} scans to {}", gen.dataset.scans.len(), out.display());
    Ok(())
}

/// Samples of the scans in `split` (all scans when the dataset has none).
pub fn samples_for(ds: &Dataset, split: Split, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    let mut scans = ds.split(split);
    if scans.is_empty() {
        scans = ds.scans.iter().collect();
    }
    scans.iter().map(|s| Sample::from_scan(s, cfg, &ds.anomalous_classes)).collect()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

/// Trains on the training scans of `data`, writes the checkpoint, the
/// epoch log (`<stem>.log.csv`) and the resolved config (`<stem>.config.json`).
pub fn cmd_train(cfg: &RunConfig, data: &Path, checkpoint_path: &Path) -> Result<FitResult> {
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let samples = samples_for(&ds, Split::Train, &cfg.train)?;
    let (train, val) = split_dataset(&samples, cfg.train.split, cfg.train.seed)?;
    let start = Instant::now();
    let result = fit(&train, &val, &cfg.train)?;
    log::info!(
        "trained {} epochs in {:.1}s, best epoch {}",
        cfg.train.epochs,
        start.elapsed().as_secs_f64(),
        result.model.best_epoch
    );
    if let Some(dir) = checkpoint_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(&result.model, checkpoint_path)?;
    write_text(&sibling(checkpoint_path, ".log.csv"), &log_csv(&result.log))?;
    write_text(&sibling(checkpoint_path, ".config.json"), &cfg.to_json())?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanMetrics {
    pub checkpoint: String,
    pub scan_id: String,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub checkpoint: String,
    pub best_epoch: usize,
    pub micro: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_avg: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub runs: Vec<CheckpointSummary>,
    /// Mean precision, recall and F1 of the micro metrics over runs.
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_macro_f1: Option<f64>,
}

/// Evaluates each checkpoint on the held-out scans of `data`; writes
/// `metrics.csv` and `summary.json` into `out`.
pub fn cmd_eval(checkpoints: &[PathBuf], data: &Path, out: &Path, macro_avg: bool) -> Result<EvalSummary> {
    if checkpoints.is_empty() {
        return Err(Error::Config("at least one checkpoint is required".into()));
    }
    let ds = read_dataset(data)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for path in checkpoints {
        let model = checkpoint::load(path)?;
        let samples = samples_for(&ds, Split::Test, &model.config)?;
        let per_scan = model.evaluate(&samples)?;
        let name = path.display().to_string();
        for (s, m) in samples.iter().zip(&per_scan) {
            rows.push(ScanMetrics { checkpoint: name.clone(), scan_id: s.id.clone(), metrics: *m });
        }
        runs.push(CheckpointSummary {
            checkpoint: name,
            best_epoch: model.best_epoch,
            micro: Metrics::micro(&per_scan),
            macro_avg: macro_avg.then(|| Metrics::macro_avg(&per_scan)),
        });
    }
    let n = runs.len() as f64;
    let mean = |f: fn(&CheckpointSummary) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let summary = EvalSummary {
        mean_precision: mean(|r| r.micro.precision),
        mean_recall: mean(|r| r.micro.recall),
        mean_f1: mean(|r| r.micro.f1),
        mean_macro_f1: macro_avg.then(|| mean(|r| r.macro_avg.map_or(0.0, |m| m.f1))),
        runs,
    };

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("checkpoint,scan_id,precision,recall,f1,tp,fp,fn,tn\n");
    for r in &rows {
        let m = &r.metrics;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.checkpoint, r.scan_id, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_, m.tn
        ));
    }
    write_text(&out.join("metrics.csv"), &csv)?;
    write_text(&out.join("summary.json"), &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"))?;
    Ok(summary)
}

/// Traversability CSV plus costmap PGM/YAML for one cloud.
pub fn cmd_map(model: &TrainedModel, cloud_path: &Path, out: &Path, map: &MapConfig) -> Result<()> {
    map.grid.validate()?;
    let cloud = read_cloud(cloud_path)?;
    let tm = infer_map(&model.net, &model.sphere, &cloud, &map.grid, MapOptions { anomaly_override: map.anomaly_override, seed: model.config.seed })?;
    let cost = to_costmap(&tm, map.threshold)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_map_csv(&tm, &out.join("traversability.csv"))?;
    write_costmap(&cost, &out.join("costmap.pgm"))?;
    write_text(&out.join("map_config.json"), &(serde_json::to_string_pretty(map).expect("map config serializes") + "\n"))
}

/// `WxH:res` in meters, e.g. `8x8:0.15`.
pub fn parse_grid(s: &str, max_points: usize) -> Result<GridConfig> {
    let bad = || Error::Config(format!("grid `{s}` is not of the form WxH:res"));
    let (size, res) = s.split_once(':').ok_or_else(bad)?;
    let (w, h) = size.split_once('x').ok_or_else(bad)?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
    let (w, h, res) = (num(w)?, num(h)?, num(res)?);
    if !(w > 0.0 && h > 0.0 && res > 0.0) {
        return Err(bad());
    }
    let (wc, hc) = ((w / res).round().max(1.0) as usize, (h / res).round().max(1.0) as usize);
    let grid = GridConfig {
        height_cells: hc,
        width_cells: wc,
        resolution: res,
        origin: (-(wc as f64) * res / 2.0, -(hc as f64) * res / 2.0),
        max_points,
        z_crop: None,
    };
    grid.validate()?;
    Ok(grid)
}

#[derive(Debug, Parser)]
#[command(name = "gsat", version, about = "Self-supervised traversability: data generation, training, evaluation and mapping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Robot profile: wheeled or legged.
        #[arg(long)]
        profile: Option<String>,
        /// Number of training scans.
        #[arg(long)]
        scans: Option<usize>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the log and config are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// none | all-unlabeled | anomalous-only | full
        #[arg(long)]
        loss_mode: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Disable random mirroring.
        #[arg(long)]
        no_flip: bool,
        /// Disable random yaw rotation.
        #[arg(long)]
        no_yaw: bool,
        /// Disable slope-gated pitch rotation.
        #[arg(long)]
        no_pitch: bool,
    },
    /// Evaluate checkpoints on the held-out scans of a dataset.
    Eval {
        /// Checkpoint file; repeat to average over runs.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
        /// Also report per-scan macro averages.
        #[arg(long = "macro")]
        macro_avg: bool,
    },
    /// Produce a traversability map and costmap for one cloud.
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point cloud (.ply or .gspc) in the robot frame.
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Free-space threshold on the score.
        #[arg(long)]
        threshold: Option<f64>,
        /// Map extent and resolution as WxH:res, e.g. 8x8:0.15.
        #[arg(long)]
        grid: Option<String>,
        /// Zero the score of cells outside the hypersphere.
        #[arg(long)]
        anomaly_override: bool,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out, profile, scans } => {
            let mut cfg = resolve(&common)?;
            if let Some(p) = profile {
                cfg.dataset.profile = RobotProfile::by_name(&p)?;
            }
            if let Some(n) = scans {
                cfg.dataset.scans = n;
            }
            cmd_gen(&cfg, &out)
        }
        Command::Train { common, data, out, loss_mode, epochs, no_flip, no_yaw, no_pitch } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = loss_mode {
                cfg.train.loss_mode = m.parse::<LossMode>()?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if no_flip {
                cfg.train.augment.flip_prob = 0.0;
            }
            if no_yaw {
                cfg.train.augment.yaw_range = (0.0, 0.0);
            }
            if no_pitch {
                cfg.train.augment.pitch_enabled = false;
            }
            let r = cmd_train(&cfg, &data, &out)?;
            println!("best epoch {} metric {:.4}", r.model.best_epoch, r.model.best_metric);
            Ok(())
        }
        Command::Eval { checkpoint, data, out, macro_avg } => {
            let s = cmd_eval(&checkpoint, &data, &out, macro_avg)?;
            println!("precision {:.4} recall {:.4} f1 {:.4}", s.mean_precision, s.mean_recall, s.mean_f1);
            if let Some(m) = s.mean_macro_f1 {
                println!("macro f1 {m:.4}");
            }
            Ok(())
        }
        Command::Map { common, checkpoint: ckpt, cloud, out, threshold, grid, anomaly_override } => {
            let mut cfg = resolve(&common)?;
            let model = checkpoint::load(&ckpt)?;
            if let Some(t) = threshold {
                cfg.map.threshold = t;
            }
            if let Some(g) = grid {
                cfg.map.grid = parse_grid(&g, model.config.grid.max_points)?;
            }
            cfg.map.anomaly_override |= anomaly_override;
            if !(0.0..=1.0).contains(&cfg.map.threshold) {
                return Err(Error::Config(format!("threshold {} outside [0, 1]", cfg.map.threshold)));
            }
            cmd_map(&model, &cloud, &out, &cfg.map)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"train": {"learning_rate": 0.1}}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert_eq!(cfg.map.threshold, 0.5);
    }

    #[test]
    fn grid_flag() {
        let g = parse_grid("8x8:0.15", 32).unwrap();
        assert_eq!((g.height_cells, g.width_cells, g.resolution), (53, 53, 0.15));
        assert_eq!(g, GridConfig::mapping());
        assert!(parse_grid("8:0.15", 32).is_err());
        assert!(parse_grid("8x8:0", 32).is_err());
    }

    #[test]
    fn loss_mode_flag_full_is_default() {
        assert_eq!("full".parse::<LossMode>().unwrap(), TrainConfig::default().loss_mode);
        assert_eq!("all-unlabeled".parse::<LossMode>().unwrap(), LossMode::AllUnlabeled);
    }
}

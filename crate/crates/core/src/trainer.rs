//! Training loop: augmentation, forward, losses, Adam and epoch-scheduled
//! hypersphere maintenance, with validation-based model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{voxelize_pillars, GridConfig, Pillars};
use crate::dataset::Scan;
use crate::error::{Error, Result};
use crate::eval::{predict_pillars, project_labels, score, LabelGrid, Metrics};
use crate::geom::{augment, AugmentPolicy, PointCloud};
use crate::hypersphere::{distances, Hypersphere};
use crate::losses::{objective, BatchRows, LossMode, LossReport, LossWeights};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Mode, NetworkConfig, TravNet};
use crate::supervision::{build_window, rasterize, ScoreParams, SupervisionGrid, SupervisionWindow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Scans per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Center recomputation period `k` in epochs.
    pub center_period: usize,
    /// Radius EMA momentum.
    pub radius_momentum: f64,
    pub weights: LossWeights,
    pub loss_mode: LossMode,
    pub augment: AugmentPolicy,
    pub seed: u64,
    /// `(train, val)` fractions.
    pub split: (f64, f64),
    /// Supervision window length `n`.
    pub window: usize,
    pub score: ScoreParams,
    pub grid: GridConfig,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 12,
            epochs: 100,
            center_period: 5,
            radius_momentum: 0.5,
            weights: LossWeights::default(),
            loss_mode: LossMode::NormalAnomalous,
            augment: AugmentPolicy::default(),
            seed: 0,
            split: (0.8, 0.2),
            window: 50,
            score: ScoreParams::default(),
            grid: GridConfig::training(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.center_period == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::Config("epochs, center_period, batch_size and window must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.radius_momentum) {
            return Err(Error::Config("radius_momentum must be in [0, 1]".into()));
        }
        let (a, b) = self.split;
        if !(a > 0.0 && b >= 0.0) || ((a + b) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must be non-negative and sum to 1".into()));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.score.validate()?;
        self.grid.validate()?;
        self.network.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..Default::default() }
    }
}

/// A training scan with its supervision window and cached score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub window: SupervisionWindow,
    pub supervision: SupervisionGrid,
    /// Ground-truth cells, when the cloud carries class labels.
    pub labels: Option<LabelGrid>,
}

impl Sample {
    pub fn new(id: impl Into<String>, cloud: PointCloud, window: SupervisionWindow, grid: &GridConfig, anomalous: &[u16]) -> Result<Self> {
        let supervision = rasterize(&window, grid);
        let labels = match cloud.labels {
            Some(_) => Some(project_labels(&cloud, anomalous, grid)?),
            None => None,
        };
        Ok(Self { id: id.into(), cloud, window, supervision, labels })
    }

    pub fn from_scan(scan: &Scan, cfg: &TrainConfig, anomalous: &[u16]) -> Result<Self> {
        let window = build_window(&scan.trajectory, 0, cfg.window, &cfg.score)?;
        Sample::new(scan.id.clone(), scan.cloud.clone(), window, &cfg.grid, anomalous)
    }
}

/// Seeded shuffle, then the first `round(train * n)` samples train (at
/// least one on each side).
pub fn split_dataset<T: Clone>(samples: &[T], split: (f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((split.0 * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect::<Vec<T>>();
    Ok((pick(&idx[..k]), pick(&idx[k..])))
}

/// Independent stream `stream` of the run seed.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const STREAM_SHUFFLE: u64 = 1 << 60;
const STREAM_DROPOUT: u64 = 2 << 60;
const STREAM_AUGMENT: u64 = 3 << 60;

fn stream_id(kind: u64, epoch: usize, idx: usize) -> u64 {
    kind | ((epoch as u64) << 32) | idx as u64
}

/// One scan after (optional) augmentation: pillars and the score grid in
/// the same frame.
struct Prepared {
    pillars: Pillars,
    supervision: SupervisionGrid,
}

fn prepare(sample: &Sample, cfg: &TrainConfig, epoch: usize, idx: usize, train: bool) -> Result<Prepared> {
    let seed = cfg.seed ^ ((epoch as u64) << 24) ^ idx as u64;
    if !train || cfg.augment.is_identity() {
        return Ok(Prepared { pillars: voxelize_pillars(&sample.cloud, &cfg.grid, seed), supervision: sample.supervision.clone() });
    }
    let mut rng = stream_rng(cfg.seed ^ cfg.augment.seed, stream_id(STREAM_AUGMENT, epoch, idx));
    let aug = augment(&sample.cloud, &sample.window.positions(), &cfg.augment, &mut rng)?;
    Ok(Prepared {
        pillars: voxelize_pillars(&aug.cloud, &cfg.grid, seed),
        supervision: rasterize(&sample.window.with_positions(&aug.trajectory), &cfg.grid),
    })
}

/// Occupied cells of a batch split into positive (visited) and unlabeled
/// rows; `occupied[k]` is the flat batch cell of row `k`.
fn batch_rows(prepared: &[Prepared], cells: usize) -> (Vec<usize>, BatchRows) {
    let mut occupied = Vec::new();
    let mut rows = BatchRows::default();
    for (b, p) in prepared.iter().enumerate() {
        for &c in &p.pillars.cells {
            let r = occupied.len();
            occupied.push(b * cells + c);
            if p.supervision.is_visited(c) {
                rows.positive.push(r);
                rows.targets.push(p.supervision.values[c]);
            } else {
                rows.unlabeled.push(r);
            }
        }
    }
    (occupied, rows)
}

/// Epoch means plus what the sphere update needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub loss: LossReport,
    /// Row-major positive latents of the epoch.
    pub positive_latents: Vec<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub batches: usize,
    pub skipped: usize,
}

/// Runs one epoch over `samples`. With `update` false the pass is
/// forward-only (used to initialize the sphere) and leaves the network
/// untouched.
pub fn train_epoch(
    net: &mut TravNet,
    adam: &mut AdamState,
    samples: &[Sample],
    sphere: &Hypersphere,
    cfg: &TrainConfig,
    epoch: usize,
    update: bool,
) -> Result<EpochStats> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, stream_id(STREAM_SHUFFLE, epoch, 0)));
    let cells = cfg.grid.num_cells();
    let mut stats = EpochStats::default();
    let mut sums = [0.0; 4];
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let prepared = chunk.iter().map(|&i| prepare(&samples[i], cfg, epoch, i, true)).collect::<Result<Vec<_>>>()?;
        let (occupied, rows) = batch_rows(&prepared, cells);
        if rows.positive.is_empty() {
            log::warn!("epoch {epoch} batch {bi}: no positive cells, skipped");
            stats.skipped += 1;
            continue;
        }
        let mut g = Graph::new();
        let mut rng = stream_rng(cfg.seed, stream_id(STREAM_DROPOUT, epoch, bi));
        let mut mode = Mode::Train(&mut rng);
        let mut updates = Vec::new();
        let refs: Vec<&Pillars> = prepared.iter().map(|p| &p.pillars).collect();
        let q = net.pillar_encoder_forward(&mut g, &refs, &mut mode, &mut updates)?;
        let qo = g.gather_rows(q, &occupied)?;
        let out = net.head_forward(&mut g, qo, &mut mode, &mut updates)?;
        let obj = objective(&mut g, &out, qo, &rows, sphere, cfg.loss_mode, &cfg.weights)?;
        let report = obj.nodes.report(&g);
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {bi}: {report:?}")));
        }
        if update {
            g.backward(obj.nodes.total)?;
            g.accumulate_param_grads(&mut net.params);
            adam_step(&mut net.params, adam)?;
            if !net.params.all_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after epoch {epoch}, batch {bi}")));
            }
            net.apply_bn_updates(&updates);
        }
        for (s, v) in sums.iter_mut().zip([report.anomaly, report.recon, report.regression, report.total]) {
            *s += v;
        }
        stats.positive_latents.extend_from_slice(&obj.positive_latents);
        stats.n_normal += obj.n_normal;
        stats.n_anomalous += obj.n_anomalous;
        stats.batches += 1;
    }
    if stats.batches == 0 {
        return Err(Error::EmptyPositiveSet);
    }
    let n = stats.batches as f64;
    stats.loss = LossReport { anomaly: sums[0] / n, recon: sums[1] / n, regression: sums[2] / n, total: sums[3] / n };
    Ok(stats)
}

/// Row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub anomaly: f64,
    pub recon: f64,
    pub regression: f64,
    pub total: f64,
    /// Radius before and after this epoch's update.
    pub radius_before: f64,
    pub radius: f64,
    /// Mean positive distance fed to the radius update.
    pub mean_positive_distance: f64,
    pub center_updated: bool,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub skipped_batches: usize,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub val_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,anomaly,recon,regression,total,radius_before,radius,mean_positive_distance,center_updated,n_normal,n_anomalous,skipped_batches,val_precision,val_recall,val_f1,val_loss";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.anomaly,
            self.recon,
            self.regression,
            self.total,
            self.radius_before,
            self.radius,
            self.mean_positive_distance,
            u8::from(self.center_updated),
            self.n_normal,
            self.n_anomalous,
            self.skipped_batches,
            self.val_precision,
            self.val_recall,
            self.val_f1,
            self.val_loss
        )
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: TravNet,
    pub sphere: Hypersphere,
    pub config: TrainConfig,
    /// 1-based epoch of the returned weights.
    pub best_epoch: usize,
    pub best_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: TrainedModel,
    pub log: Vec<EpochLog>,
    /// Center right after initialization and after every recomputation.
    pub center_history: Vec<(usize, Vec<f64>)>,
}

/// Validation pass in eval mode: micro metrics when labels exist, and the
/// mean total loss.
fn validate(net: &TravNet, sphere: &Hypersphere, val: &[(Pillars, &Sample)], cfg: &TrainConfig) -> Result<(Option<Metrics>, f64)> {
    let mut all = Vec::new();
    let mut labeled = true;
    let mut loss = 0.0;
    let mut counted = 0;
    for (pillars, sample) in val {
        match &sample.labels {
            Some(truth) => all.push(score(&predict_pillars(net, sphere, pillars)?, truth)?),
            None => labeled = false,
        }
        let prepared = [Prepared { pillars: pillars.clone(), supervision: sample.supervision.clone() }];
        let (occupied, rows) = batch_rows(&prepared, cfg.grid.num_cells());
        if rows.positive.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let mut updates = Vec::new();
        let q = net.pillar_encoder_forward(&mut g, &[pillars], &mut Mode::Eval, &mut updates)?;
        let qo = g.gather_rows(q, &occupied)?;
        let out = net.head_forward(&mut g, qo, &mut Mode::Eval, &mut updates)?;
        let obj = objective(&mut g, &out, qo, &rows, sphere, cfg.loss_mode, &cfg.weights)?;
        loss += obj.nodes.report(&g).total;
        counted += 1;
    }
    let loss = if counted > 0 { loss / counted as f64 } else { f64::NAN };
    Ok(((labeled && !all.is_empty()).then(|| Metrics::micro(&all)), loss))
}

/// Trains on `train`, selecting the epoch with the best validation F1
/// (or lowest validation loss without labels).
/// Keeps the many short-lived activation buffers off fresh mmap pages.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(libc::M_TOP_PAD, 512 << 20);
        });
    }
}

pub fn fit(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    tune_allocator();
    if train.is_empty() {
        return Err(Error::TooFewSamples(train.len()));
    }
    let mut net = TravNet::new(cfg.network.clone())?;
    let mut adam = AdamState::new(&net.params, cfg.adam());
    let dim = cfg.network.latent_dim;
    let val_prepared: Vec<(Pillars, &Sample)> =
        val.iter().enumerate().map(|(i, s)| Ok((prepare(s, cfg, 0, i, false)?.pillars, s))).collect::<Result<_>>()?;

    // epoch 0: forward only, to place the sphere
    let mut sphere = Hypersphere::new(vec![0.0; dim], 0.0, cfg.radius_momentum, cfg.center_period)?;
    let init = train_epoch(&mut net, &mut adam, train, &sphere, cfg, 0, false)?;
    sphere.initialize(&init.positive_latents)?;
    let mut center_history = vec![(0, sphere.center.clone())];

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<TrainedModel> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let stats = train_epoch(&mut net, &mut adam, train, &sphere, cfg, epoch, true)?;
        let radius_before = sphere.radius;
        let center_updated = sphere.center_due(epoch);
        if center_updated {
            sphere.center = crate::hypersphere::compute_center(&stats.positive_latents, dim)?;
            center_history.push((epoch, sphere.center.clone()));
        }
        let d = distances(&stats.positive_latents, &sphere.center);
        let mean_d = d.iter().sum::<f64>() / d.len().max(1) as f64;
        sphere.radius = crate::hypersphere::update_radius(sphere.radius, &d, sphere.momentum)?;

        let (metrics, val_loss) = if val.is_empty() { (None, f64::NAN) } else { validate(&net, &sphere, &val_prepared, cfg)? };
        let m = metrics.unwrap_or_default();
        let row = EpochLog {
            epoch,
            anomaly: stats.loss.anomaly,
            recon: stats.loss.recon,
            regression: stats.loss.regression,
            total: stats.loss.total,
            radius_before,
            radius: sphere.radius,
            mean_positive_distance: mean_d,
            center_updated,
            n_normal: stats.n_normal,
            n_anomalous: stats.n_anomalous,
            skipped_batches: stats.skipped,
            val_precision: m.precision,
            val_recall: m.recall,
            val_f1: m.f1,
            val_loss,
        };
        log::info!(
            "epoch {epoch:>3} total {:.4} radius {:.4} val_f1 {:.4} ({:.1}s)",
            row.total,
            row.radius,
            row.val_f1,
            start.elapsed().as_secs_f64()
        );
        log.push(row);

        // higher is better for F1, so losses are negated
        let metric = match metrics {
            Some(m) => m.f1,
            None if val_loss.is_finite() => -val_loss,
            None => -stats.loss.total,
        };
        if best.as_ref().map_or(true, |b| metric > b.best_metric) {
            best = Some(TrainedModel { net: net.clone(), sphere: sphere.clone(), config: cfg.clone(), best_epoch: epoch, best_metric: metric });
        }
    }
    let model = best.expect("at least one epoch ran");
    Ok(FitResult { model, log, center_history })
}

impl TrainedModel {
    /// Per-scan metrics of labeled samples in eval mode.
    pub fn evaluate(&self, samples: &[Sample]) -> Result<Vec<Metrics>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let truth = s.labels.as_ref().ok_or(Error::MissingLabels)?;
                let pillars = prepare(s, &self.config, 0, i, false)?.pillars;
                score(&predict_pillars(&self.net, &self.sphere, &pillars)?, truth)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::supervision::TrajectorySample;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            center_period: 2,
            window: 10,
            grid: GridConfig::centered(2.4, 0.3, 8),
            network: NetworkConfig { backbone_convs: 1, ..Default::default() },
            augment: AugmentPolicy { pitch_enabled: false, ..Default::default() },
            ..Default::default()
        }
    }

    /// Flat floor with a box obstacle; the robot drives along +x.
    fn sample(k: u64) -> Sample {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..24 {
            for j in 0..24 {
                let (x, y) = (-1.15 + i as f64 * 0.1, -1.15 + j as f64 * 0.1);
                let on_box = x > 0.3 && y > 0.5;
                pts.push(Point3::new(x, y, if on_box { 0.5 } else { 0.01 * ((i + j + k as usize) % 3) as f64 }));
                labels.push(u16::from(on_box));
            }
        }
        let traj: Vec<TrajectorySample> = (0..=10)
            .map(|s| TrajectorySample {
                time: s as f64 * 0.1,
                position: [-1.0 + s as f64 * 0.2, -0.3],
                v_actual: [1.0, 0.0],
                v_cmd: [1.0, 0.0],
            })
            .collect();
        let cfg = tiny_cfg();
        let w = build_window(&traj, 0, cfg.window, &cfg.score).unwrap();
        Sample::new(format!("s{k}"), PointCloud::with_labels(pts, labels), w, &cfg.grid, &[1]).unwrap()
    }

    #[test]
    fn split_examples() {
        let xs: Vec<usize> = (0..10).collect();
        let (a, b) = split_dataset(&xs, (0.8, 0.2), 3).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, xs);
        assert_eq!(split_dataset(&xs, (0.8, 0.2), 3).unwrap(), (a, b));
        assert!(matches!(split_dataset(&[1], (0.8, 0.2), 0), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { center_period: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { split: (0.7, 0.2), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fit_is_deterministic_and_logs_sphere_updates() {
        let train: Vec<Sample> = (0..4).map(sample).collect();
        let val = vec![sample(9)];
        let cfg = tiny_cfg();
        let a = fit(&train, &val, &cfg).unwrap();
        let b = fit(&train, &val, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.net.params, b.model.net.params);
        assert_eq!(a.log.len(), 3);
        let updated: Vec<usize> = a.log.iter().filter(|r| r.center_updated).map(|r| r.epoch).collect();
        assert_eq!(updated, vec![2]);
        assert_eq!(a.center_history.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 2]);
        // radius replay
        for r in &a.log {
            let expect = 0.5 * r.radius_before + 0.5 * r.mean_positive_distance;
            assert_eq!(r.radius, expect);
        }
        // the selected epoch is never beaten
        let best = a.log[a.model.best_epoch - 1].val_f1;
        assert!(a.log.iter().all(|r| r.val_f1 <= best));
        assert!(a.log[..a.model.best_epoch - 1].iter().all(|r| r.val_f1 < best));
    }

    #[test]
    fn single_epoch_returns_epoch_one() {
        let train: Vec<Sample> = (0..2).map(sample).collect();
        let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
        let r = fit(&train, &[sample(5)], &cfg).unwrap();
        assert_eq!(r.model.best_epoch, 1);
        assert_ne!(r.model.net.params, TravNet::new(cfg.network.clone()).unwrap().params);
    }

    #[test]
    fn frozen_sphere_epochs_repeat() {
        let train: Vec<Sample> = (0..3).map(sample).collect();
        let cfg = tiny_cfg();
        let net = TravNet::new(cfg.network.clone()).unwrap();
        let sphere = Hypersphere::new(vec![0.0; 8], 1.0, 0.5, 5).unwrap();
        let run = || {
            let mut n = net.clone();
            let mut adam = AdamState::new(&n.params, cfg.adam());
            train_epoch(&mut n, &mut adam, &train, &sphere, &cfg, 1, true).unwrap().loss
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn no_positive_cells_is_an_error() {
        let mut s = sample(0);
        s.supervision.values.iter_mut().for_each(|v| *v = crate::supervision::UNVISITED);
        let cfg = tiny_cfg();
        let mut net = TravNet::new(cfg.network.clone()).unwrap();
        let mut adam = AdamState::new(&net.params, cfg.adam());
        let sphere = Hypersphere::new(vec![0.0; 8], 1.0, 0.5, 5).unwrap();
        let r = train_epoch(&mut net, &mut adam, &[s], &sphere, &TrainConfig { augment: AugmentPolicy::identity(), ..cfg }, 1, true);
        assert!(matches!(r, Err(Error::EmptyPositiveSet)));
    }

    #[test]
    fn none_mode_ignores_unlabeled_gradients() {
        // with the regression term off, none mode must give the same
        // gradients whatever the unlabeled rows are
        let cfg = TrainConfig {
            loss_mode: LossMode::None,
            weights: LossWeights { regression: 0.0, ..Default::default() },
            augment: AugmentPolicy::identity(),
            ..tiny_cfg()
        };
        let s = sample(0);
        let net = TravNet::new(cfg.network.clone()).unwrap();
        let sphere = Hypersphere::new(vec![0.0; 8], 0.1, 0.5, 5).unwrap();
        let grads = |unlabeled_kept: bool| {
            let p = prepare(&s, &cfg, 0, 0, false).unwrap();
            let cells = cfg.grid.num_cells();
            let (occupied, mut rows) = batch_rows(std::slice::from_ref(&p), cells);
            if !unlabeled_kept {
                rows.unlabeled.clear();
            }
            let mut g = Graph::new();
            let mut updates = Vec::new();
            let q = net.pillar_encoder_forward(&mut g, &[&p.pillars], &mut Mode::Eval, &mut updates).unwrap();
            let qo = g.gather_rows(q, &occupied).unwrap();
            let out = net.head_forward(&mut g, qo, &mut Mode::Eval, &mut updates).unwrap();
            let obj = objective(&mut g, &out, qo, &rows, &sphere, cfg.loss_mode, &cfg.weights).unwrap();
            g.backward(obj.nodes.total).unwrap();
            let mut store = net.params.clone();
            g.accumulate_param_grads(&mut store);
            store.iter().map(|(_, p)| p.grad.clone().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(grads(true), grads(false));
    }
}

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BatchStats, Graph, Var};
use super::params::{ParamGroup, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::bev::{Pillars, POINT_FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub point_feat_dim: usize,
    pub cell_feat_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub recon_hidden: usize,
    pub dropout_rate: f64,
    pub backbone_convs: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            point_feat_dim: POINT_FEATURES,
            cell_feat_dim: 32,
            latent_dim: 8,
            encoder_hidden: 16,
            recon_hidden: 16,
            dropout_rate: 0.1,
            backbone_convs: 2,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_feat_dim != POINT_FEATURES {
            return Err(Error::Config(format!(
                "network.point_feat_dim must be {POINT_FEATURES}, got {}",
                self.point_feat_dim
            )));
        }
        for (name, v) in [
            ("cell_feat_dim", self.cell_feat_dim),
            ("latent_dim", self.latent_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("recon_hidden", self.recon_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("network.{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("network.dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("network.bn_momentum outside [0, 1]".into()));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::Config("network.bn_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    slot: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    pfn: Dense,
    pfn_bn: Norm,
    convs: Vec<(Dense, Norm)>,
    enc1: Dense,
    enc_bn: Norm,
    enc2: Dense,
    reg: Dense,
    rec1: Dense,
    rec_bn: Norm,
    rec2: Dense,
}

/// Forward-pass mode. Training draws dropout masks from the given RNG and
/// normalizes with batch statistics.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Batch statistics produced by a training forward pass, applied to the
/// running averages with [`TravNet::apply_bn_updates`].
#[derive(Debug, Clone)]
pub struct BnUpdate {
    slot: usize,
    stats: BatchStats,
    count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// Latents `[n, latent_dim]`.
    pub z: Var,
    /// Traversability scores `[n, 1]`.
    pub t: Var,
    /// Reconstructed cell features `[n, cell_feat_dim]`.
    pub u: Var,
}

/// The traversability network: pillar encoder with a small conv backbone,
/// latent encoder, regression head and reconstruction head.
#[derive(Debug, Clone)]
pub struct TravNet {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub bn: Vec<BnRunning>,
    layout: Layout,
}

fn uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: Vec<usize>) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect() }
}

impl TravNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let c = config.cell_feat_dim;

        let dense = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, g, fan_in, shape: Vec<usize>| {
            let out = *shape.last().unwrap();
            let w = params.add(format!("{name}.weight"), g, uniform(rng, fan_in, shape));
            let b = params.add(format!("{name}.bias"), g, Tensor::zeros(vec![out]));
            Dense { w, b }
        };
        let norm = |params: &mut ParamStore, bn: &mut Vec<BnRunning>, name: &str, g, dim: usize| {
            let gamma = params.add(format!("{name}.gamma"), g, Tensor { shape: vec![dim], data: vec![1.0; dim] });
            let beta = params.add(format!("{name}.beta"), g, Tensor::zeros(vec![dim]));
            bn.push(BnRunning { name: name.to_string(), mean: vec![0.0; dim], var: vec![1.0; dim] });
            Norm { gamma, beta, slot: bn.len() - 1 }
        };

        use ParamGroup::*;
        let pfn = dense(&mut params, &mut rng, "bev.pfn", Bev, POINT_FEATURES, vec![POINT_FEATURES, c]);
        let pfn_bn = norm(&mut params, &mut bn, "bev.pfn.bn", Bev, c);
        let mut convs = Vec::new();
        for k in 0..config.backbone_convs {
            let name = format!("bev.conv{k}");
            let d = dense(&mut params, &mut rng, &name, Bev, 9 * c, vec![9, c, c]);
            let n = norm(&mut params, &mut bn, &format!("{name}.bn"), Bev, c);
            convs.push((d, n));
        }
        let (eh, l, rh) = (config.encoder_hidden, config.latent_dim, config.recon_hidden);
        let enc1 = dense(&mut params, &mut rng, "enc.fc1", Encoder, c, vec![c, eh]);
        let enc_bn = norm(&mut params, &mut bn, "enc.bn", Encoder, eh);
        let enc2 = dense(&mut params, &mut rng, "enc.fc2", Encoder, eh, vec![eh, l]);
        let reg = dense(&mut params, &mut rng, "reg.fc", Regression, l, vec![l, 1]);
        let rec1 = dense(&mut params, &mut rng, "rec.fc1", Reconstruction, l, vec![l, rh]);
        let rec_bn = norm(&mut params, &mut bn, "rec.bn", Reconstruction, rh);
        let rec2 = dense(&mut params, &mut rng, "rec.fc2", Reconstruction, rh, vec![rh, c]);

        Ok(Self {
            config,
            params,
            bn,
            layout: Layout { pfn, pfn_bn, convs, enc1, enc_bn, enc2, reg, rec1, rec_bn, rec2 },
        })
    }

    fn dense(&self, g: &mut Graph, x: Var, d: Dense) -> Result<Var> {
        let w = g.param(&self.params, d.w);
        let b = g.param(&self.params, d.b);
        g.linear(x, w, Some(b))
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm, mode: &Mode, updates: &mut Vec<BnUpdate>) -> Result<Var> {
        let gamma = g.param(&self.params, n.gamma);
        let beta = g.param(&self.params, n.beta);
        if mode.is_train() {
            let count = g.value(x).rows();
            let (y, stats) = g.batch_norm(x, gamma, beta, self.config.bn_eps)?;
            updates.push(BnUpdate { slot: n.slot, stats, count });
            Ok(y)
        } else {
            let run = &self.bn[n.slot];
            g.batch_norm_fixed(x, gamma, beta, &run.mean, &run.var, self.config.bn_eps)
        }
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: &mut Mode) -> Var {
        match mode {
            Mode::Train(rng) => g.dropout(x, self.config.dropout_rate, &mut **rng),
            Mode::Eval => x,
        }
    }

    /// BEV feature map for a batch of scans sharing one grid, returned as
    /// `[batch * H * W, cell_feat_dim]` with rows in scan-major, then
    /// row-major cell order.
    pub fn pillar_encoder_forward(
        &self,
        g: &mut Graph,
        batch: &[&Pillars],
        mode: &mut Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let Some(first) = batch.first() else {
            return Err(Error::ShapeMismatch("pillar encoder needs at least one scan".into()));
        };
        let grid = &first.grid;
        let cells = grid.num_cells();
        let total: usize = batch.iter().map(|p| p.rows.len()).sum();
        let mut rows = Vec::with_capacity(total * POINT_FEATURES);
        let mut offsets = vec![0usize];
        let mut targets = Vec::new();
        for (b, p) in batch.iter().enumerate() {
            if p.grid.height_cells != grid.height_cells || p.grid.width_cells != grid.width_cells {
                return Err(Error::ShapeMismatch("scans in a batch must share grid dimensions".into()));
            }
            if p.offsets.len() != p.cells.len() + 1 {
                return Err(Error::ShapeMismatch("malformed pillar offsets".into()));
            }
            let base = offsets.last().copied().unwrap_or(0);
            for r in &p.rows {
                rows.extend_from_slice(r);
            }
            for k in 0..p.cells.len() {
                offsets.push(base + p.offsets[k + 1]);
                targets.push(b * cells + p.cells[k]);
            }
        }
        let x = g.constant(Tensor { shape: vec![total, POINT_FEATURES], data: rows });
        let l = &self.layout;
        let h = self.dense(g, x, l.pfn)?;
        let h = self.norm(g, h, l.pfn_bn, mode, updates)?;
        let h = g.relu(h);
        let c = self.config.cell_feat_dim;
        let mut q = g.segment_max(h, &offsets, &targets, batch.len() * cells)?;
        for (d, n) in &l.convs {
            let img = g.reshape(q, vec![batch.len(), grid.height_cells, grid.width_cells, c])?;
            let w = g.param(&self.params, d.w);
            let b = g.param(&self.params, d.b);
            let y = g.conv3x3(img, w, b)?;
            let y = g.reshape(y, vec![batch.len() * cells, c])?;
            let y = self.norm(g, y, *n, mode, updates)?;
            q = g.relu(y);
        }
        Ok(q)
    }

    /// Encoder, regression and reconstruction heads over `[n, cell_feat_dim]`
    /// features.
    pub fn head_forward(
        &self,
        g: &mut Graph,
        features: Var,
        mode: &mut Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<HeadOutput> {
        let shape = &g.value(features).shape;
        if shape.len() != 2 || shape[1] != self.config.cell_feat_dim {
            return Err(Error::ShapeMismatch(format!(
                "head expects [n, {}] features, got {shape:?}",
                self.config.cell_feat_dim
            )));
        }
        let l = &self.layout;
        let a = self.dense(g, features, l.enc1)?;
        let a = self.norm(g, a, l.enc_bn, mode, updates)?;
        let a = self.dropout(g, a, mode);
        let a = g.relu(a);
        let z = self.dense(g, a, l.enc2)?;

        let t = self.dense(g, z, l.reg)?;
        let t = g.sigmoid(t);

        let r = self.dense(g, z, l.rec1)?;
        let r = self.norm(g, r, l.rec_bn, mode, updates)?;
        let r = self.dropout(g, r, mode);
        let r = g.relu(r);
        let u = self.dense(g, r, l.rec2)?;
        Ok(HeadOutput { z, t, u })
    }

    /// Folds training batch statistics into the running averages:
    /// `running = m * running + (1 - m) * batch`. Empty batches are skipped.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            if u.count == 0 {
                continue;
            }
            let run = &mut self.bn[u.slot];
            for (r, b) in run.mean.iter_mut().zip(&u.stats.mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in run.var.iter_mut().zip(&u.stats.var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
    }

    /// Eval-mode latents and scores for the occupied cells of one scan.
    pub fn infer(&self, pillars: &Pillars) -> Result<Inference> {
        let mut g = Graph::new();
        let mut updates = Vec::new();
        let q = self.pillar_encoder_forward(&mut g, &[pillars], &mut Mode::Eval, &mut updates)?;
        let cells: Vec<usize> = pillars.cells.clone();
        let qo = g.gather_rows(q, &cells)?;
        let out = self.head_forward(&mut g, qo, &mut Mode::Eval, &mut updates)?;
        Ok(Inference {
            cells,
            latents: g.value(out.z).clone(),
            scores: g.value(out.t).data.clone(),
        })
    }
}

/// Per-occupied-cell network outputs of one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Flat indices of occupied cells.
    pub cells: Vec<usize>,
    /// `[cells.len(), latent_dim]`.
    pub latents: Tensor,
    pub scores: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{voxelize_pillars, GridConfig};
    use crate::geom::{Point3, PointCloud};

    fn small_grid() -> GridConfig {
        GridConfig {
            height_cells: 6,
            width_cells: 5,
            resolution: 0.5,
            origin: (-1.25, -1.5),
            max_points: 8,
            z_crop: None,
        }
    }

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| Point3::new(rng.gen_range(-1.2..1.2), rng.gen_range(-1.4..1.4), rng.gen_range(-0.3..0.8)))
                .collect(),
        )
    }

    #[test]
    fn param_partition_is_total() {
        let net = TravNet::new(NetworkConfig::default()).unwrap();
        let total: usize = [ParamGroup::Bev, ParamGroup::Encoder, ParamGroup::Regression, ParamGroup::Reconstruction]
            .iter()
            .map(|g| net.params.group_ids(*g).len())
            .sum();
        assert_eq!(total, net.params.len());
        assert!(net.params.all_finite());
    }

    #[test]
    fn empty_pillars_give_zero_features() {
        let cfg = NetworkConfig { backbone_convs: 0, ..Default::default() };
        let net = TravNet::new(cfg).unwrap();
        let grid = small_grid();
        let p = voxelize_pillars(&PointCloud::default(), &grid, 0);
        let mut g = Graph::new();
        let q = net.pillar_encoder_forward(&mut g, &[&p], &mut Mode::Eval, &mut Vec::new()).unwrap();
        assert_eq!(g.value(q).shape, vec![grid.num_cells(), 32]);
        assert!(g.value(q).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_cell_support_without_backbone() {
        let cfg = NetworkConfig { backbone_convs: 0, ..Default::default() };
        let mut net = TravNet::new(cfg).unwrap();
        // shift the running mean so that a zero feature row normalizes to
        // something negative and the point row to something positive
        for b in &mut net.bn {
            b.mean.iter_mut().for_each(|m| *m = -0.5);
        }
        let grid = small_grid();
        let cloud = PointCloud::new(vec![Point3::new(0.1, 0.2, 0.3)]);
        let p = voxelize_pillars(&cloud, &grid, 0);
        let mut g = Graph::new();
        let q = net.pillar_encoder_forward(&mut g, &[&p], &mut Mode::Eval, &mut Vec::new()).unwrap();
        let t = g.value(q);
        let cell = p.cells[0];
        for r in 0..grid.num_cells() {
            let nz = t.row(r).iter().any(|v| *v != 0.0);
            assert_eq!(nz, r == cell, "row {r}");
        }
    }

    #[test]
    fn head_ranges_and_empty_input() {
        let net = TravNet::new(NetworkConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor { shape: vec![10, 32], data: (0..320).map(|_| rng.gen_range(-2.0..2.0)).collect() });
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let out = net.head_forward(&mut g, x, &mut Mode::Train(&mut r2), &mut Vec::new()).unwrap();
        assert!(g.value(out.t).data.iter().all(|t| *t > 0.0 && *t < 1.0));
        assert_eq!(g.value(out.z).shape, vec![10, 8]);
        assert_eq!(g.value(out.u).shape, vec![10, 32]);

        let e = g.constant(Tensor::zeros(vec![0, 32]));
        let out = net.head_forward(&mut g, e, &mut Mode::Train(&mut r2), &mut Vec::new()).unwrap();
        assert!(g.value(out.z).is_empty() && g.value(out.t).is_empty() && g.value(out.u).is_empty());

        let bad = g.constant(Tensor::zeros(vec![2, 31]));
        assert!(matches!(
            net.head_forward(&mut g, bad, &mut Mode::Eval, &mut Vec::new()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn eval_is_deterministic() {
        let net = TravNet::new(NetworkConfig::default()).unwrap();
        let p = voxelize_pillars(&random_cloud(1, 200), &small_grid(), 0);
        let a = net.infer(&p).unwrap();
        let b = net.infer(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), p.num_pillars());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut net = TravNet::new(NetworkConfig { backbone_convs: 0, ..Default::default() }).unwrap();
        let p = voxelize_pillars(&random_cloud(2, 100), &small_grid(), 0);
        let mut g = Graph::new();
        let mut updates = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.pillar_encoder_forward(&mut g, &[&p], &mut Mode::Train(&mut rng), &mut updates).unwrap();
        let stats = updates[0].stats.clone();
        net.apply_bn_updates(&updates);
        for k in 0..32 {
            assert_eq!(net.bn[0].mean[k], 0.9 * 0.0 + (1.0 - 0.9) * stats.mean[k]);
            assert_eq!(net.bn[0].var[k], 0.9 * 1.0 + (1.0 - 0.9) * stats.var[k]);
        }
    }

    #[test]
    fn full_network_gradients_match_finite_differences() {
        let cfg = NetworkConfig { backbone_convs: 1, cell_feat_dim: 6, dropout_rate: 0.0, ..Default::default() };
        let net = TravNet::new(cfg).unwrap();
        let grid = GridConfig { height_cells: 3, width_cells: 3, ..small_grid() };
        let pillars = [
            voxelize_pillars(&random_cloud(5, 30), &grid, 0),
            voxelize_pillars(&random_cloud(6, 30), &grid, 0),
        ];
        let loss_of = |net: &TravNet| -> (f64, Graph, Var) {
            let mut g = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut mode = Mode::Train(&mut rng);
            let refs: Vec<&Pillars> = pillars.iter().collect();
            let q = net.pillar_encoder_forward(&mut g, &refs, &mut mode, &mut Vec::new()).unwrap();
            let out = net.head_forward(&mut g, q, &mut mode, &mut Vec::new()).unwrap();
            let d = g.sub(out.u, q).unwrap();
            let n = g.row_sq_norm(d);
            let a = g.mean(n);
            let zn = g.row_sq_norm(out.z);
            let b = g.mean(zn);
            let ts = g.square(out.t);
            let c = g.mean(ts);
            let loss = g.weighted_sum(&[(a, 1.0), (b, 0.5), (c, 2.0)]).unwrap();
            (g.value(loss).item(), g, loss)
        };
        let (_, mut g, loss) = loss_of(&net);
        g.backward(loss).unwrap();
        let base_pattern = g.kink_pattern();
        let mut store = net.params.clone();
        store.zero_grads();
        g.accumulate_param_grads(&mut store);
        let h = 1e-4;
        let mut checked = 0;
        for id in net.params.ids() {
            let grad = store.get(id).grad.clone().unwrap();
            for k in 0..grad.len() {
                let mut plus = net.clone();
                plus.params.get_mut(id).value.data[k] += h;
                let mut minus = net.clone();
                minus.params.get_mut(id).value.data[k] -= h;
                let (lp, gp, _) = loss_of(&plus);
                let (lm, gm, _) = loss_of(&minus);
                if gp.kink_pattern() != base_pattern || gm.kink_pattern() != base_pattern {
                    continue;
                }
                let num = (lp - lm) / (2.0 * h);
                let err = (num - grad[k]).abs() / num.abs().max(grad[k].abs()).max(1e-6);
                assert!(err < 1e-4, "{} [{k}]: analytic {} numeric {num}", store.get(id).name, grad[k]);
                checked += 1;
            }
        }
        assert!(checked > net.params.num_scalars() / 2);
    }
}

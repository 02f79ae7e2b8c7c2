//! Anomaly, reconstruction and regression losses built on the autodiff graph.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::{classify, Hypersphere};
use crate::nn::{Graph, HeadOutput, Var};

/// Which unlabeled terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Positive pull only; unlabeled latents are ignored by the anomaly loss.
    None,
    /// Every unlabeled latent is pushed away as anomalous.
    AllUnlabeled,
    /// Anomalous latents are pushed away, normal latents are left alone.
    AnomalousOnly,
    /// Normal latents are pulled in and anomalous ones pushed away.
    NormalAnomalous,
}

impl LossMode {
    pub const ALL: [LossMode; 4] =
        [LossMode::None, LossMode::AllUnlabeled, LossMode::AnomalousOnly, LossMode::NormalAnomalous];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::None => "none",
            LossMode::AllUnlabeled => "all_unlabeled",
            LossMode::AnomalousOnly => "anomalous_only",
            LossMode::NormalAnomalous => "normal_anomalous",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.replace('-', "_").as_str() {
            "none" => LossMode::None,
            "all_unlabeled" => LossMode::AllUnlabeled,
            "anomalous_only" => LossMode::AnomalousOnly,
            "normal_anomalous" | "full" => LossMode::NormalAnomalous,
            other => return Err(Error::Config(format!("unknown loss mode `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub anomaly: f64,
    pub recon: f64,
    pub regression: f64,
    pub zeta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { anomaly: 1.0, recon: 1.0, regression: 20.0, zeta: 1e-6 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta > 0.0) {
            return Err(Error::Config("loss zeta must be positive".into()));
        }
        if [self.anomaly, self.recon, self.regression].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub anomaly: f64,
    pub recon: f64,
    pub regression: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_parts(anomaly: f64, recon: f64, regression: f64, w: &LossWeights) -> Self {
        Self { anomaly, recon, regression, total: total_loss(anomaly, recon, regression, w) }
    }
}

pub fn total_loss(anomaly: f64, recon: f64, regression: f64, w: &LossWeights) -> f64 {
    w.anomaly * anomaly + w.recon * recon + w.regression * regression
}

fn mean_sq_dist(g: &mut Graph, z: Var, center: &[f64]) -> Result<Var> {
    let d = g.sub_const(z, center)?;
    let n = g.row_sq_norm(d);
    Ok(g.mean(n))
}

/// Positive pull, normal pull and inverse-distance push around `center`.
/// Empty normal or anomalous sets contribute zero.
pub fn anomaly_loss(g: &mut Graph, z_p: Var, z_n: Option<Var>, z_a: Option<Var>, center: &[f64], zeta: f64) -> Result<Var> {
    if g.value(z_p).rows() == 0 {
        return Err(Error::EmptyPositiveSet);
    }
    let mut terms = vec![(mean_sq_dist(g, z_p, center)?, 1.0)];
    if let Some(z_n) = z_n {
        terms.push((mean_sq_dist(g, z_n, center)?, 1.0));
    }
    if let Some(z_a) = z_a {
        let d = g.sub_const(z_a, center)?;
        let n = g.row_sq_norm(d);
        let s = g.add_scalar(n, zeta);
        let r = g.recip(s);
        terms.push((g.mean(r), 1.0));
    }
    g.weighted_sum(&terms)
}

/// Mean over pairs of the squared distance between reconstructions and
/// their targets.
pub fn recon_loss(g: &mut Graph, u_p: Var, q_p: Var) -> Result<Var> {
    let (a, b) = (g.value(u_p), g.value(q_p));
    if a.shape != b.shape {
        return Err(Error::SizeMismatch(format!("reconstruction {:?} vs target {:?}", a.shape, b.shape)));
    }
    if a.rows() == 0 {
        return Err(Error::EmptyPositiveSet);
    }
    let d = g.sub(u_p, q_p)?;
    let n = g.row_sq_norm(d);
    Ok(g.mean(n))
}

/// Squared error of positive scores against their targets plus the squared
/// anomalous scores.
pub fn regression_loss(g: &mut Graph, t_p: Var, targets: &[f64], t_a: Option<Var>) -> Result<Var> {
    if g.value(t_p).len() != targets.len() {
        return Err(Error::SizeMismatch(format!(
            "{} positive scores vs {} targets",
            g.value(t_p).len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    let d = g.sub_const(t_p, targets)?;
    let s = g.square(d);
    let mut terms = vec![(g.mean(s), 1.0)];
    if let Some(t_a) = t_a {
        let s = g.square(t_a);
        terms.push((g.mean(s), 1.0));
    }
    g.weighted_sum(&terms)
}

/// Graph nodes of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub anomaly: Var,
    pub recon: Var,
    pub regression: Var,
    pub total: Var,
}

impl LossNodes {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            anomaly: g.value(self.anomaly).item(),
            recon: g.value(self.recon).item(),
            regression: g.value(self.regression).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Rows of the head outputs that are positive (traversed) or unlabeled.
#[derive(Debug, Clone, Default)]
pub struct BatchRows {
    pub positive: Vec<usize>,
    /// Score targets aligned with `positive`.
    pub targets: Vec<f64>,
    pub unlabeled: Vec<usize>,
}

/// Objective plus the unlabeled split it was computed with.
#[derive(Debug, Clone)]
pub struct Objective {
    pub nodes: LossNodes,
    pub n_normal: usize,
    pub n_anomalous: usize,
    /// Latent rows of the positive set, for sphere maintenance.
    pub positive_latents: Vec<f64>,
}

/// Builds the mode-dependent objective over head outputs. `features` are the
/// head inputs, used as (detached) reconstruction targets.
pub fn objective(
    g: &mut Graph,
    out: &HeadOutput,
    features: Var,
    rows: &BatchRows,
    sphere: &Hypersphere,
    mode: LossMode,
    weights: &LossWeights,
) -> Result<Objective> {
    if rows.positive.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    let z_p = g.gather_rows(out.z, &rows.positive)?;
    let z_u = g.gather_rows(out.z, &rows.unlabeled)?;
    let partition = classify(&g.value(z_u).data, sphere);
    let pick = |idx: &[usize]| idx.iter().map(|&k| rows.unlabeled[k]).collect::<Vec<_>>();
    let (normal_rows, anomalous_rows) = match mode {
        LossMode::AllUnlabeled => (Vec::new(), rows.unlabeled.clone()),
        _ => (pick(&partition.normal), pick(&partition.anomalous)),
    };
    let nonempty = |v: &Vec<usize>| !v.is_empty();

    let z_n = match mode {
        LossMode::NormalAnomalous if nonempty(&normal_rows) => Some(g.gather_rows(out.z, &normal_rows)?),
        _ => None,
    };
    let z_a = match mode {
        LossMode::None => None,
        _ if nonempty(&anomalous_rows) => Some(g.gather_rows(out.z, &anomalous_rows)?),
        _ => None,
    };
    let anomaly = anomaly_loss(g, z_p, z_n, z_a, &sphere.center, weights.zeta)?;

    let u_p = g.gather_rows(out.u, &rows.positive)?;
    let q = g.detach(features);
    let q_p = g.gather_rows(q, &rows.positive)?;
    let recon = recon_loss(g, u_p, q_p)?;

    let t_p = g.gather_rows(out.t, &rows.positive)?;
    let t_a = if anomalous_rows.is_empty() { None } else { Some(g.gather_rows(out.t, &anomalous_rows)?) };
    let regression = regression_loss(g, t_p, &rows.targets, t_a)?;

    let total = g.weighted_sum(&[(anomaly, weights.anomaly), (recon, weights.recon), (regression, weights.regression)])?;
    Ok(Objective {
        nodes: LossNodes { anomaly, recon, regression, total },
        n_normal: normal_rows.len(),
        n_anomalous: anomalous_rows.len(),
        positive_latents: g.value(z_p).data.clone(),
    })
}

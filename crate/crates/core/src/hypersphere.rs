//! Positive hypersphere: center, EMA radius and boundary classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypersphere {
    pub center: Vec<f64>,
    pub radius: f64,
    /// EMA momentum of the radius.
    pub momentum: f64,
    /// Center recomputation period in epochs.
    pub update_period: usize,
}

impl Hypersphere {
    pub fn new(center: Vec<f64>, radius: f64, momentum: f64, update_period: usize) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::Numeric(format!("hypersphere radius {radius} is not a finite non-negative value")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("hypersphere momentum {momentum} outside [0, 1]")));
        }
        if update_period == 0 {
            return Err(Error::Config("hypersphere update period must be at least 1".into()));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("hypersphere center is not finite".into()));
        }
        Ok(Self { center, radius, momentum, update_period })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn distance(&self, z: &[f64]) -> f64 {
        sq_dist(z, &self.center).sqrt()
    }

    /// Inside or on the boundary.
    pub fn is_normal(&self, z: &[f64]) -> bool {
        self.distance(z) <= self.radius
    }

    /// Sets the center from `latents` and the radius to their mean distance,
    /// as used before the first scheduled update.
    pub fn initialize(&mut self, latents: &[f64]) -> Result<()> {
        self.center = compute_center(latents, self.dim())?;
        let d = distances(latents, &self.center);
        self.radius = update_radius(0.0, &d, 0.0)?;
        Ok(())
    }

    /// Whether the center is recomputed at the end of `epoch` (1-based).
    pub fn center_due(&self, epoch: usize) -> bool {
        epoch % self.update_period == 0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean of the row-major `[n, dim]` latents.
pub fn compute_center(latents: &[f64], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || latents.is_empty() {
        return Err(Error::EmptyPositiveSet);
    }
    let n = latents.len() / dim;
    let mut c = vec![0.0; dim];
    for row in latents.chunks_exact(dim) {
        for (a, v) in c.iter_mut().zip(row) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|a| *a /= n as f64);
    Ok(c)
}

/// Euclidean distance of every row to `center`.
pub fn distances(latents: &[f64], center: &[f64]) -> Vec<f64> {
    latents.chunks_exact(center.len().max(1)).map(|r| sq_dist(r, center).sqrt()).collect()
}

/// `momentum * r_prev + (1 - momentum) * mean(d)`.
pub fn update_radius(r_prev: f64, d: &[f64], momentum: f64) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::EmptyDistanceSet);
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    Ok(momentum * r_prev + (1.0 - momentum) * mean)
}

/// Split of unlabeled latents by the sphere; indices refer to the rows of
/// the classified set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.normal.len() + self.anomalous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn classify(latents: &[f64], sphere: &Hypersphere) -> Partition {
    let mut p = Partition::default();
    for (i, row) in latents.chunks_exact(sphere.dim().max(1)).enumerate() {
        if sphere.is_normal(row) {
            p.normal.push(i);
        } else {
            p.anomalous.push(i);
        }
    }
    p
}

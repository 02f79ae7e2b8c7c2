use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Plane `normal . p = offset` with a unit, upward-facing normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    /// Normalizes `normal` and flips it so that `normal.z >= 0`.
    /// Returns `None` for a zero or non-finite normal.
    pub fn from_normal_point(normal: [f64; 3], on_plane: &Point3) -> Option<Plane> {
        let len = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
        if !(len.is_finite() && len > 0.0) {
            return None;
        }
        let sign = if normal[2] < 0.0 { -1.0 } else { 1.0 };
        let n = [sign * normal[0] / len, sign * normal[1] / len, sign * normal[2] / len];
        let offset = n[0] * on_plane.x + n[1] * on_plane.y + n[2] * on_plane.z;
        Some(Plane { normal: n, offset })
    }

    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal[0] * p.x + self.normal[1] * p.y + self.normal[2] * p.z - self.offset
    }

    /// Plane height at `(x, y)`; `None` for a vertical plane.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        if self.normal[2].abs() < 1e-12 {
            return None;
        }
        Some((self.offset - self.normal[0] * x - self.normal[1] * y) / self.normal[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_dist: f64,
    pub min_inlier_frac: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_dist: 0.05,
            min_inlier_frac: 0.6,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("ransac.iterations must be >= 1".into()));
        }
        if !(self.inlier_dist > 0.0) {
            return Err(Error::Config("ransac.inlier_dist must be > 0".into()));
        }
        if !(self.min_inlier_frac > 0.0 && self.min_inlier_frac <= 1.0) {
            return Err(Error::Config("ransac.min_inlier_frac must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Fits the dominant plane of `cloud` by RANSAC over random 3-point
/// hypotheses, then refits it by total least squares on the inliers.
///
/// Returns the refit plane and the fraction of points within
/// `inlier_dist` of it.
pub fn ransac_ground(cloud: &PointCloud, cfg: &RansacConfig) -> Result<(Plane, f64)> {
    cfg.validate()?;
    let pts = &cloud.points;
    if pts.len() < 3 {
        return Err(Error::DegenerateCloud(format!("{} points, need at least 3", pts.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(Plane, usize)> = None;
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, pts.len(), 3);
        let (a, b, c) = (pts[idx.index(0)], pts[idx.index(1)], pts[idx.index(2)]);
        let u = [b.x - a.x, b.y - a.y, b.z - a.z];
        let v = [c.x - a.x, c.y - a.y, c.z - a.z];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let scale = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]) * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        let cross2 = n[0] * n[0] + n[1] * n[1] + n[2] * n[2];
        // sin^2 of the angle between the two edges; rejects (near-)collinear triples
        if !(scale > 0.0) || cross2 / scale < 1e-12 {
            continue;
        }
        let Some(plane) = Plane::from_normal_point(n, &a) else {
            continue;
        };
        let count = count_inliers(pts, &plane, cfg.inlier_dist);
        if best.map_or(true, |(_, c)| count > c) {
            best = Some((plane, count));
        }
    }

    let (hypothesis, _) = best.ok_or_else(|| {
        Error::DegenerateCloud(format!("all {} hypotheses were collinear", cfg.iterations))
    })?;

    let inliers: Vec<Point3> = pts
        .iter()
        .filter(|p| hypothesis.signed_distance(p).abs() <= cfg.inlier_dist)
        .copied()
        .collect();
    let plane = refit(&inliers).unwrap_or(hypothesis);
    let frac = count_inliers(pts, &plane, cfg.inlier_dist) as f64 / pts.len() as f64;
    Ok((plane, frac))
}

fn count_inliers(pts: &[Point3], plane: &Plane, dist: f64) -> usize {
    pts.iter().filter(|p| plane.signed_distance(p).abs() <= dist).count()
}

/// Total least squares: the normal is the eigenvector of the smallest
/// eigenvalue of the inlier covariance.
fn refit(inliers: &[Point3]) -> Option<Plane> {
    if inliers.len() < 3 {
        return None;
    }
    let n = inliers.len() as f64;
    let mut centroid = Vector3::zeros();
    for p in inliers {
        centroid += Vector3::new(p.x, p.y, p.z);
    }
    centroid /= n;
    let mut cov = Matrix3::zeros();
    for p in inliers {
        let d = Vector3::new(p.x, p.y, p.z) - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / n);
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(min_idx);
    Plane::from_normal_point(
        [normal[0], normal[1], normal[2]],
        &Point3::new(centroid[0], centroid[1], centroid[2]),
    )
}

/// Angle between the plane normal and the vertical, in `[0, pi/2]` for
/// canonical (upward) normals.
pub fn slope_angle(plane: &Plane) -> f64 {
    plane.normal[2].clamp(-1.0, 1.0).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotate_pitch;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn planted(seed: u64, tilt: f64, outlier_frac: f64, sigma: f64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let n_out = (n as f64 * outlier_frac).round() as usize;
        let mut pts = Vec::with_capacity(n);
        for _ in 0..(n - n_out) {
            pts.push(Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), noise.sample(&mut rng)));
        }
        let mut cloud = rotate_pitch(&PointCloud::new(pts), tilt);
        for _ in 0..n_out {
            cloud.points.push(Point3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-2.0..2.0),
            ));
        }
        cloud
    }

    #[test]
    fn recovers_flat_plane() {
        let cloud = planted(1, 0.0, 0.0, 0.01, 500);
        let (plane, frac) = ransac_ground(&cloud, &RansacConfig::default()).unwrap();
        assert!(slope_angle(&plane).to_degrees() < 1.0);
        assert!(frac > 0.95);
    }

    #[test]
    fn recovers_tilted_plane_with_outliers() {
        let cloud = planted(2, 5f64.to_radians(), 0.2, 0.01, 500);
        let (plane, frac) = ransac_ground(&cloud, &RansacConfig::default()).unwrap();
        let slope = slope_angle(&plane).to_degrees();
        assert!((slope - 5.0).abs() < 1.0, "slope {slope}");
        assert!((0.0..=1.0).contains(&frac));
    }

    #[test]
    fn too_few_points() {
        let cloud = PointCloud::new(vec![Point3::default(), Point3::new(1.0, 0.0, 0.0)]);
        assert!(matches!(
            ransac_ground(&cloud, &RansacConfig::default()),
            Err(Error::DegenerateCloud(_))
        ));
    }

    #[test]
    fn collinear_points() {
        let cloud = PointCloud::new((0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect());
        assert!(matches!(
            ransac_ground(&cloud, &RansacConfig::default()),
            Err(Error::DegenerateCloud(_))
        ));
    }

    #[test]
    fn deterministic_for_seed() {
        let cloud = planted(3, 0.1, 0.3, 0.02, 300);
        let cfg = RansacConfig { seed: 9, ..Default::default() };
        assert_eq!(ransac_ground(&cloud, &cfg).unwrap(), ransac_ground(&cloud, &cfg).unwrap());
    }

    #[test]
    fn slope_examples() {
        let flat = Plane { normal: [0.0, 0.0, 1.0], offset: 0.0 };
        assert_eq!(slope_angle(&flat), 0.0);
        let t = 10f64.to_radians();
        let p = Plane { normal: [t.sin(), 0.0, t.cos()], offset: 0.0 };
        assert!((slope_angle(&p) - t).abs() < 1e-12);
        let q = 45f64.to_radians();
        let p = Plane { normal: [q.sin(), 0.0, q.cos()], offset: 0.0 };
        assert!((slope_angle(&p) - q).abs() < 1e-9);
    }

    #[test]
    fn canonical_orientation() {
        let p = Plane::from_normal_point([0.0, 0.0, -2.0], &Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p.normal, [0.0, 0.0, 1.0]);
        assert_eq!(p.offset, 1.0);
        assert_eq!(p.height_at(3.0, 4.0), Some(1.0));
    }
}

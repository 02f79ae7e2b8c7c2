use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{flip_x, ransac_ground, rotate_pitch, rotate_yaw, slope_angle, Plane, PointCloud, RansacConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Uniform yaw range in radians, `(low, high)`.
    pub yaw_range: (f64, f64),
    pub pitch_enabled: bool,
    /// Pitch is only applied when the estimated ground slope is below this.
    pub pitch_slope_gate: f64,
    pub seed: u64,
    pub ransac: RansacConfig,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            yaw_range: (-FRAC_PI_2, FRAC_PI_2),
            pitch_enabled: true,
            pitch_slope_gate: 10f64.to_radians(),
            seed: 0,
            ransac: RansacConfig::default(),
        }
    }
}

impl AugmentPolicy {
    /// Policy that leaves clouds and trajectories untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            yaw_range: (0.0, 0.0),
            pitch_enabled: false,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flip_prob == 0.0 && self.yaw_range == (0.0, 0.0) && !self.pitch_enabled
    }

    pub fn validate(&self) -> Result<()> {
        let pi = std::f64::consts::PI;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("augment.flip_prob must be in [0, 1]".into()));
        }
        let (lo, hi) = self.yaw_range;
        if !(lo >= -pi && hi <= pi && lo <= hi) {
            return Err(Error::Config("augment.yaw_range must be an ordered pair within [-pi, pi]".into()));
        }
        if !(self.pitch_slope_gate >= 0.0) {
            return Err(Error::Config("augment.pitch_slope_gate must be >= 0".into()));
        }
        self.ransac.validate()
    }
}

/// Record of what [`augment`] actually did.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AppliedTransforms {
    pub flipped: bool,
    pub yaw: f64,
    /// Estimated ground slope, when RANSAC ran.
    pub ground_slope: Option<f64>,
    pub pitch: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub cloud: PointCloud,
    pub trajectory: Vec<[f64; 2]>,
    pub applied: AppliedTransforms,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    // always consume one draw so the stream layout does not depend on the range
    let u: f64 = rng.gen();
    lo + (hi - lo) * u
}

/// Applies flip, yaw and (gated) pitch to a cloud and, identically, to the
/// trajectory positions expressed in the same frame.
///
/// Pitch runs only when RANSAC on the below-median-height half of the cloud
/// finds one dominant plane (inlier fraction at least
/// `policy.ransac.min_inlier_frac`) whose slope is below
/// `policy.pitch_slope_gate`; the pitch angle is drawn from
/// `[-slope, slope]`. Trajectory positions are lifted onto that plane before
/// being pitched.
pub fn augment<R: Rng + ?Sized>(
    cloud: &PointCloud,
    trajectory: &[[f64; 2]],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Augmented> {
    let mut applied = AppliedTransforms::default();
    let mut out = cloud.clone();
    let mut traj: Vec<[f64; 2]> = trajectory.to_vec();

    let flip_draw: f64 = rng.gen();
    if flip_draw < policy.flip_prob {
        out = flip_x(&out);
        for p in &mut traj {
            p[0] = -p[0];
        }
        applied.flipped = true;
    }

    let psi = uniform(rng, policy.yaw_range.0, policy.yaw_range.1);
    if psi != 0.0 {
        out = rotate_yaw(&out, psi);
        let (s, c) = psi.sin_cos();
        for p in &mut traj {
            *p = [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        }
    }
    applied.yaw = psi;

    let ransac_seed: u64 = rng.gen();
    let pitch_draw: f64 = rng.gen();
    if policy.pitch_enabled {
        let ground = lower_half(&out);
        let cfg = RansacConfig {
            seed: ransac_seed,
            ..policy.ransac
        };
        let (plane, frac) = ransac_ground(&ground, &cfg)?;
        let slope = slope_angle(&plane);
        applied.ground_slope = Some(slope);
        if frac >= policy.ransac.min_inlier_frac && slope < policy.pitch_slope_gate {
            let theta = -slope + 2.0 * slope * pitch_draw;
            out = rotate_pitch(&out, theta);
            pitch_trajectory(&mut traj, &plane, theta);
            applied.pitch = Some(theta);
        }
    }

    Ok(Augmented {
        cloud: out,
        trajectory: traj,
        applied,
    })
}

fn pitch_trajectory(traj: &mut [[f64; 2]], ground: &Plane, theta: f64) {
    let (s, c) = theta.sin_cos();
    for p in traj {
        let z = ground.height_at(p[0], p[1]).unwrap_or(0.0);
        p[0] = c * p[0] + s * z;
    }
}

/// Points at or below the median height, the candidate ground set.
fn lower_half(cloud: &PointCloud) -> PointCloud {
    if cloud.is_empty() {
        return PointCloud::default();
    }
    let mut zs: Vec<f64> = cloud.points.iter().map(|p| p.z).collect();
    let mid = zs.len() / 2;
    let (_, median, _) = zs.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let median = *median;
    PointCloud::new(cloud.points.iter().filter(|p| p.z <= median).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sloped_ground(slope_deg: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = slope_deg.to_radians().tan();
        let pts = (0..2000)
            .map(|_| {
                let x: f64 = rng.gen_range(-6.0..6.0);
                let y: f64 = rng.gen_range(-6.0..6.0);
                Point3::new(x, y, g * x + rng.gen_range(-0.01..0.01))
            })
            .collect();
        PointCloud::new(pts)
    }

    #[test]
    fn identity_policy_is_identity() {
        let cloud = sloped_ground(3.0, 1);
        let traj = vec![[0.5, 0.25], [1.0, -2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(&cloud, &traj, &AugmentPolicy::identity(), &mut rng).unwrap();
        assert_eq!(out.cloud, cloud);
        assert_eq!(out.trajectory, traj);
    }

    #[test]
    fn steep_ground_skips_pitch() {
        let cloud = sloped_ground(15.0, 2);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = AugmentPolicy { flip_prob: 1.0, ..Default::default() };
            let out = augment(&cloud, &[[1.0, 0.0]], &policy, &mut rng).unwrap();
            assert!(out.applied.pitch.is_none());
            assert!(out.applied.flipped);
            let slope = out.applied.ground_slope.unwrap().to_degrees();
            assert!((slope - 15.0).abs() < 1.0, "slope {slope}");
        }
    }

    #[test]
    fn gentle_ground_gets_bounded_pitch() {
        let cloud = sloped_ground(6.0, 3);
        let mut pitched = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&cloud, &[], &AugmentPolicy::default(), &mut rng).unwrap();
            let slope = out.applied.ground_slope.unwrap();
            if let Some(theta) = out.applied.pitch {
                assert!(theta.abs() <= slope + 1e-12);
                pitched += 1;
            }
        }
        assert_eq!(pitched, 10);
    }

    #[test]
    fn deterministic_given_rng_state() {
        let cloud = sloped_ground(4.0, 5);
        let traj = vec![[1.0, 1.0], [2.0, 1.5]];
        let run = |s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            augment(&cloud, &traj, &AugmentPolicy::default(), &mut rng).unwrap()
        };
        let (a, b) = (run(11), run(11));
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn pitch_failure_propagates_only_when_enabled() {
        let tiny = PointCloud::new(vec![Point3::default()]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(augment(&tiny, &[], &AugmentPolicy::default(), &mut rng).is_err());
        let no_pitch = AugmentPolicy { pitch_enabled: false, ..Default::default() };
        assert!(augment(&tiny, &[], &no_pitch, &mut rng).is_ok());
    }

    #[test]
    fn trajectory_follows_the_cloud() {
        // tag the point directly under each trajectory position and check it
        // stays under the transformed position
        let mut cloud = sloped_ground(5.0, 6);
        let traj = vec![[0.3, 0.4], [1.7, -2.2], [-3.1, 2.9]];
        let g = 5f64.to_radians().tan();
        for p in &traj {
            cloud.points.push(Point3::new(p[0], p[1], g * p[0]));
        }
        let n = cloud.len();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment(&cloud, &traj, &AugmentPolicy::default(), &mut rng).unwrap();
            for (k, t) in out.trajectory.iter().enumerate() {
                let p = out.cloud.points[n - traj.len() + k];
                let d = ((p.x - t[0]).powi(2) + (p.y - t[1]).powi(2)).sqrt();
                assert!(d < 0.01, "seed {seed}: drift {d}");
            }
        }
    }
}

// Flip, yaw and pitch isometries, RANSAC ground recovery and the pitch
// slope gate.

use gsat::geom::{augment, flip_x, ransac_ground, rotate_pitch, rotate_yaw, AugmentPolicy, Point3, PointCloud, RansacConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default)]
pub struct AugmentReport {
    /// Largest change of any pairwise distance under flip, yaw or pitch.
    pub distance_err: f64,
    /// Largest deviation of flip∘flip, yaw(-a)∘yaw(a), pitch(-a)∘pitch(a)
    /// from the identity.
    pub inverse_err: f64,
    pub ransac_seeds: usize,
    /// Worst angle between planted and recovered normals, degrees.
    pub ransac_max_err_deg: f64,
    /// Gate decisions that disagreed with the planted slope.
    pub gate_errors: usize,
    pub gate_cases: usize,
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| Point3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0), rng.gen_range(-1.0..2.0))).collect())
}

fn max_dev(a: &PointCloud, b: &PointCloud) -> f64 {
    a.points.iter().zip(&b.points).map(|(p, q)| p.dist(q)).fold(0.0, f64::max)
}

/// Planted plane `z = gx x + gy y + 0.3` with 20% uniform outliers above it.
fn planted(rng: &mut ChaCha8Rng, slope_deg: f64, n: usize) -> (PointCloud, [f64; 3]) {
    let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let t = slope_deg.to_radians().tan();
    let (gx, gy) = (t * dir.cos(), t * dir.sin());
    let pts = (0..n)
        .map(|k| {
            let (x, y) = (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
            let z = gx * x + gy * y + 0.3;
            if k % 5 == 0 {
                Point3::new(x, y, z + rng.gen_range(0.2..2.5))
            } else {
                Point3::new(x, y, z + rng.gen_range(-0.01..0.01))
            }
        })
        .collect();
    let norm = (gx * gx + gy * gy + 1.0).sqrt();
    (PointCloud::new(pts), [-gx / norm, -gy / norm, 1.0 / norm])
}

pub fn run_example() -> AugmentReport {
    let mut rep = AugmentReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    for _ in 0..20 {
        let c = random_cloud(&mut rng, 60);
        let a: f64 = rng.gen_range(-3.0..3.0);
        let images = [flip_x(&c), rotate_yaw(&c, a), rotate_pitch(&c, a)];
        for img in &images {
            for i in 0..c.len() {
                for j in 0..i {
                    let d0 = c.points[i].dist(&c.points[j]);
                    let d1 = img.points[i].dist(&img.points[j]);
                    rep.distance_err = rep.distance_err.max((d0 - d1).abs());
                }
            }
        }
        rep.inverse_err = rep
            .inverse_err
            .max(max_dev(&flip_x(&images[0]), &c))
            .max(max_dev(&rotate_yaw(&images[1], -a), &c))
            .max(max_dev(&rotate_pitch(&images[2], -a), &c));
    }

    for seed in 0..50u64 {
        let slope = rng.gen_range(0.0..25.0);
        let (cloud, normal) = planted(&mut rng, slope, 3000);
        let cfg = RansacConfig { seed, ..Default::default() };
        let (plane, _) = ransac_ground(&cloud, &cfg).unwrap();
        let dot: f64 = (0..3).map(|k| plane.normal[k] * normal[k]).sum::<f64>().abs();
        rep.ransac_max_err_deg = rep.ransac_max_err_deg.max(dot.min(1.0).acos().to_degrees());
        rep.ransac_seeds += 1;
    }

    // the gate must skip pitch on slopes of 10 degrees and more
    for (k, slope) in [2.0, 5.0, 8.0, 9.5, 10.5, 12.0, 15.0, 20.0].into_iter().enumerate() {
        let (cloud, _) = planted(&mut rng, slope, 3000);
        let policy = AugmentPolicy { flip_prob: 0.0, yaw_range: (0.0, 0.0), ..Default::default() };
        let mut r = ChaCha8Rng::seed_from_u64(k as u64);
        let out = augment(&cloud, &[[1.0, 0.0]], &policy, &mut r).unwrap();
        let pitched = out.applied.pitch.is_some();
        if pitched != (slope < 10.0) {
            rep.gate_errors += 1;
        }
        if let Some(theta) = out.applied.pitch {
            if theta.abs() > out.applied.ground_slope.unwrap() {
                rep.gate_errors += 1;
            }
        }
        rep.gate_cases += 1;
    }
    println!("{rep:?}");
    rep
}

#[allow(dead_code)]
fn main() {
    run_example();
}

// Pillar voxelization of random clouds and the invariants every pillar
// satisfies.

use gsat::bev::{voxelize_pillars, GridConfig, Pillars};
use gsat::geom::{Point3, PointCloud};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default)]
pub struct VoxelReport {
    pub clouds: usize,
    pub pillars: usize,
    /// Largest excursion of `(x_l, y_l)` beyond half a cell.
    pub offset_excess: f64,
    /// Largest norm of the per-pillar mean of `(x_c, y_c, z_c)`.
    pub max_centroid: f64,
    pub sigma_mismatches: usize,
    /// Largest difference between pillars of a cloud and of its permutation.
    pub permutation_diff: f64,
}

fn sorted_rows(p: &Pillars, k: usize) -> Vec<[f64; 7]> {
    let mut rows = p.rows[p.offsets[k]..p.offsets[k + 1]].to_vec();
    rows.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    rows
}

pub fn run_example() -> VoxelReport {
    let grid = GridConfig::centered(6.0, 0.15, 32);
    let half = grid.resolution / 2.0;
    let mut rep = VoxelReport::default();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // sparse enough that no cell overflows, so the full point set is kept
        let n = rng.gen_range(50..400);
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-0.5..1.5)))
            .collect();
        let cloud = PointCloud::new(pts.clone());
        let p = voxelize_pillars(&cloud, &grid, seed);
        rep.clouds += 1;
        rep.pillars += p.cells.len();
        for k in 0..p.cells.len() {
            let rows = &p.rows[p.offsets[k]..p.offsets[k + 1]];
            let mut mean = [0.0; 3];
            for r in rows {
                rep.offset_excess = rep.offset_excess.max(r[0].abs() - half).max(r[1].abs() - half);
                (0..3).for_each(|c| mean[c] += r[3 + c] / rows.len() as f64);
                if r[6] != rows[0][6] {
                    rep.sigma_mismatches += 1;
                }
            }
            rep.max_centroid = rep.max_centroid.max(mean.iter().map(|m| m * m).sum::<f64>().sqrt());
        }

        let mut shuffled = pts;
        shuffled.shuffle(&mut rng);
        let q = voxelize_pillars(&PointCloud::new(shuffled), &grid, seed);
        assert_eq!(p.cells, q.cells);
        for k in 0..p.cells.len() {
            for (a, b) in sorted_rows(&p, k).iter().zip(sorted_rows(&q, k)) {
                for c in 0..7 {
                    rep.permutation_diff = rep.permutation_diff.max((a[c] - b[c]).abs());
                }
            }
        }
    }
    println!("{rep:?}");
    rep
}

#[allow(dead_code)]
fn main() {
    run_example();
}

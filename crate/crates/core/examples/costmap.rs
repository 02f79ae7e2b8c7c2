// Thresholding traversability maps into costmaps and the PGM/YAML and CSV
// file round trips.

use gsat::bev::GridConfig;
use gsat::mapper::{read_costmap, read_map_csv, to_costmap, write_costmap, write_map_csv, CostCell, TraversabilityMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, Default)]
pub struct CostmapReport {
    pub maps: usize,
    pub monotonicity_violations: usize,
    /// Cells at exactly 0.5 that did not come out free, plus cells just
    /// below 0.5 that did not come out occupied.
    pub convention_errors: usize,
    pub pgm_round_trip: bool,
    pub csv_round_trip: bool,
}

fn random_map(rng: &mut ChaCha8Rng) -> TraversabilityMap {
    let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
    let grid = GridConfig { height_cells: h, width_cells: w, resolution: rng.gen_range(0.05..0.5), origin: (rng.gen_range(-5.0..0.0), rng.gen_range(-5.0..0.0)), max_points: 32, z_crop: None };
    let mut map = TraversabilityMap::empty(grid);
    for k in 0..h * w {
        if rng.gen_bool(0.8) {
            map.unknown[k] = false;
            // a few exact ties with the thresholds drawn below
            map.scores[k] = if rng.gen_bool(0.1) { (rng.gen_range(0..=10) as f64) / 10.0 } else { rng.gen() };
        }
    }
    map.pose = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-3.0..3.0)];
    map
}

pub fn run_example() -> CostmapReport {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rep = CostmapReport::default();
    for _ in 0..10_000 {
        let map = random_map(&mut rng);
        let mut ts = [(rng.gen_range(0..=10) as f64) / 10.0, rng.gen()];
        ts.sort_by(f64::total_cmp);
        let (lo, hi) = (to_costmap(&map, ts[0]).unwrap(), to_costmap(&map, ts[1]).unwrap());
        for (a, b) in lo.cells.iter().zip(&hi.cells) {
            // raising the threshold may only turn free cells occupied
            let ok = (*a == CostCell::Unknown) == (*b == CostCell::Unknown) && !(*a == CostCell::Occupied && *b == CostCell::Free);
            if !ok {
                rep.monotonicity_violations += 1;
            }
        }
        rep.maps += 1;
    }

    let grid = GridConfig { height_cells: 1, width_cells: 3, resolution: 0.1, origin: (0.0, 0.0), max_points: 32, z_crop: None };
    let mut map = TraversabilityMap::empty(grid);
    map.scores[..2].copy_from_slice(&[0.5, 0.5 - f64::EPSILON]);
    map.unknown[..2].fill(false);
    let c = to_costmap(&map, 0.5).unwrap();
    rep.convention_errors = (c.cells[0] != CostCell::Free) as usize + (c.cells[1] != CostCell::Occupied) as usize + (c.cells[2] != CostCell::Unknown) as usize;

    let dir = tempfile::tempdir().unwrap();
    let map = random_map(&mut rng);
    let cost = to_costmap(&map, 0.5).unwrap();
    let pgm = dir.path().join("costmap.pgm");
    let yaml = write_costmap(&cost, &pgm).unwrap();
    println!("wrote {} and {}", pgm.display(), yaml.display());
    rep.pgm_round_trip = read_costmap(&pgm, 32).unwrap() == cost;
    let csv = dir.path().join("traversability.csv");
    write_map_csv(&map, &csv).unwrap();
    // the CSV carries no frame pose
    let back = read_map_csv(&csv, 32).unwrap();
    rep.csv_round_trip = TraversabilityMap { pose: map.pose, ..back } == map;
    println!("{rep:?}");
    rep
}

#[allow(dead_code)]
fn main() {
    run_example();
}

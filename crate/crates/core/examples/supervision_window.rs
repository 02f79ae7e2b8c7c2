// Velocity-tracking scores and their rasterization onto the BEV grid.

use gsat::bev::GridConfig;
use gsat::supervision::{build_window, rasterize, traversability_score, ScoreParams, TrajectorySample, UNVISITED};

#[derive(Debug, Clone, Copy, Default)]
pub struct SupervisionReport {
    /// Score at `v_error == v_th`.
    pub tau_at_threshold: f64,
    pub cells_checked: usize,
    pub cell_errors: usize,
}

fn sample(x: f64, y: f64, err: f64) -> TrajectorySample {
    // actual velocity lags the command by `err` along x
    TrajectorySample { time: 0.0, position: [x, y], v_actual: [1.0 - err, 0.0], v_cmd: [1.0, 0.0] }
}

pub fn run_example() -> SupervisionReport {
    let params = ScoreParams::default();
    let mut rep = SupervisionReport::default();
    // half squared error of (0.5, 0.5) is exactly v_th = 0.25
    rep.tau_at_threshold = traversability_score([1.0, 0.5], [0.5, 0.0], &params);
    println!("tau at threshold: {}", rep.tau_at_threshold);

    let grid = GridConfig { height_cells: 4, width_cells: 4, resolution: 1.0, origin: (0.0, 0.0), max_points: 4, z_crop: None };
    let sig = |e: f64| 1.0 / (1.0 + (params.eta * (0.5 * e * e - params.v_th)).exp());
    // five samples: two share cell (0, 0), two share cell (2, 1), one falls off the grid
    let windows = [
        vec![sample(0.2, 0.3, 0.0), sample(0.7, 0.6, 1.0), sample(1.5, 2.5, 0.5), sample(1.1, 2.9, 0.2), sample(9.0, 9.0, 0.0)],
        vec![sample(3.5, 3.5, 0.3); 5],
    ];
    let expected: [Vec<((usize, usize), f64)>; 2] = [
        vec![((0, 0), 0.5 * (sig(0.0) + sig(1.0))), ((2, 1), 0.5 * (sig(0.5) + sig(0.2)))],
        vec![((3, 3), sig(0.3))],
    ];
    for (traj, want) in windows.iter().zip(&expected) {
        let w = build_window(traj, 0, 4, &params).unwrap();
        assert_eq!(w.entries.len(), 5);
        let g = rasterize(&w, &grid);
        for i in 0..4 {
            for j in 0..4 {
                let target = want.iter().find(|(c, _)| *c == (i, j)).map_or(UNVISITED, |c| c.1);
                rep.cells_checked += 1;
                if (g.get(i, j) - target).abs() > 1e-12 {
                    rep.cell_errors += 1;
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

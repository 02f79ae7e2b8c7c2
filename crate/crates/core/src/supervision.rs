//! Traversability supervision from driven trajectories.
//!
//! Each sample's score comes from how well the robot tracked its velocity
//! command: `v_error = 0.5 * |v - v_cmd|^2` and
//! `tau = sigmoid(-eta * (v_error - v_th))`. A window of upcoming samples is
//! then rasterized onto the BEV grid, averaging scores per cell and marking
//! unvisited cells with [`UNVISITED`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bev::GridConfig;
use crate::error::{Error, Result};

/// Sentinel for cells without traversal evidence.
pub const UNVISITED: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrajectorySample {
    pub time: f64,
    pub position: [f64; 2],
    pub v_actual: [f64; 2],
    pub v_cmd: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreParams {
    pub eta: f64,
    pub v_th: f64,
    /// When set, every sample gets this score regardless of velocities.
    pub constant_tau: Option<f64>,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            eta: 2.0,
            v_th: 0.25,
            constant_tau: None,
        }
    }
}

impl ScoreParams {
    pub fn constant(tau: f64) -> Self {
        Self {
            constant_tau: Some(tau),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config("score.eta must be > 0".into()));
        }
        if !(self.v_th >= 0.0) {
            return Err(Error::Config("score.v_th must be >= 0".into()));
        }
        if let Some(t) = self.constant_tau {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("score.constant_tau must be in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn velocity_error(v_actual: [f64; 2], v_cmd: [f64; 2]) -> f64 {
    0.5 * ((v_actual[0] - v_cmd[0]).powi(2) + (v_actual[1] - v_cmd[1]).powi(2))
}

pub fn traversability_score(v_actual: [f64; 2], v_cmd: [f64; 2], params: &ScoreParams) -> f64 {
    if let Some(tau) = params.constant_tau {
        return tau;
    }
    sigmoid(-params.eta * (velocity_error(v_actual, v_cmd) - params.v_th))
}

/// Scored positions `b^s` for `s` in `[t, t + n]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupervisionWindow {
    pub entries: Vec<([f64; 2], f64)>,
    pub window_size: usize,
}

impl SupervisionWindow {
    pub fn positions(&self) -> Vec<[f64; 2]> {
        self.entries.iter().map(|e| e.0).collect()
    }

    /// Same scores at new positions (e.g. after augmentation or a frame change).
    pub fn with_positions(&self, positions: &[[f64; 2]]) -> SupervisionWindow {
        assert_eq!(positions.len(), self.entries.len());
        SupervisionWindow {
            entries: positions.iter().zip(&self.entries).map(|(p, e)| (*p, e.1)).collect(),
            window_size: self.window_size,
        }
    }
}

pub fn build_window(
    trajectory: &[TrajectorySample],
    t_index: usize,
    n: usize,
    params: &ScoreParams,
) -> Result<SupervisionWindow> {
    // the window is inclusive, so sample t + n must exist
    if t_index + n >= trajectory.len() {
        return Err(Error::WindowOutOfRange {
            start: t_index,
            len: n,
            available: trajectory.len(),
        });
    }
    let entries = trajectory[t_index..=t_index + n]
        .iter()
        .map(|s| (s.position, traversability_score(s.v_actual, s.v_cmd, params)))
        .collect();
    Ok(SupervisionWindow { entries, window_size: n })
}

/// BEV grid of target scores; [`UNVISITED`] marks cells without evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionGrid {
    pub grid: GridConfig,
    pub values: Vec<f64>,
}

impl SupervisionGrid {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.flat(i, j)]
    }

    pub fn is_visited(&self, flat: usize) -> bool {
        self.values[flat] != UNVISITED
    }

    pub fn visited_count(&self) -> usize {
        self.values.iter().filter(|v| **v != UNVISITED).count()
    }
}

pub fn rasterize(window: &SupervisionWindow, grid: &GridConfig) -> SupervisionGrid {
    let n = grid.num_cells();
    let mut sum = vec![0.0; n];
    let mut cnt = vec![0u32; n];
    for (pos, tau) in &window.entries {
        if let Some((i, j)) = grid.cell_of_xy(pos[0], pos[1]) {
            let k = grid.flat(i, j);
            sum[k] += tau;
            cnt[k] += 1;
        }
    }
    let values = sum
        .iter()
        .zip(&cnt)
        .map(|(s, &c)| if c == 0 { UNVISITED } else { s / c as f64 })
        .collect();
    SupervisionGrid { grid: *grid, values }
}

/// Reads a trajectory CSV with header `time,x,y[,vx,vy,vcx,vcy]`.
///
/// Returns the samples and whether velocity columns were present; without
/// them velocities are zero and callers should score in constant mode.
pub fn read_trajectory_csv(path: &Path) -> Result<(Vec<TrajectorySample>, bool)> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(it), Some(ix), Some(iy)) = (col("time"), col("x"), col("y")) else {
        return Err(Error::format(path, "header must contain time,x,y"));
    };
    let vel = match (col("vx"), col("vy"), col("vcx"), col("vcy")) {
        (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
        (None, None, None, None) => None,
        _ => return Err(Error::format(path, "velocity columns must be all present or all absent")),
    };
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            let v = rec
                .get(i)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format(path, format!("row {row}: bad number in column {i}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::format(path, format!("row {row}: non-finite value")))
            }
        };
        let mut s = TrajectorySample {
            time: num(it)?,
            position: [num(ix)?, num(iy)?],
            ..Default::default()
        };
        if let Some([a, b, c, d]) = vel {
            s.v_actual = [num(a)?, num(b)?];
            s.v_cmd = [num(c)?, num(d)?];
        }
        if let Some(prev) = out.last() {
            let prev: &TrajectorySample = prev;
            if !(s.time > prev.time) {
                return Err(Error::format(path, format!("row {row}: times must be strictly increasing")));
            }
        }
        out.push(s);
    }
    Ok((out, vel.is_some()))
}

pub fn write_trajectory_csv(samples: &[TrajectorySample], with_velocities: bool, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let res = (|| -> csv::Result<()> {
        if with_velocities {
            w.write_record(["time", "x", "y", "vx", "vy", "vcx", "vcy"])?;
        } else {
            w.write_record(["time", "x", "y"])?;
        }
        for s in samples {
            let mut rec = vec![format!("{:?}", s.time), format!("{:?}", s.position[0]), format!("{:?}", s.position[1])];
            if with_velocities {
                rec.extend(
                    [s.v_actual[0], s.v_actual[1], s.v_cmd[0], s.v_cmd[1]]
                        .iter()
                        .map(|v| format!("{v:?}")),
                );
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    })();
    res.map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> GridConfig {
        GridConfig {
            height_cells: 4,
            width_cells: 4,
            resolution: 1.0,
            origin: (0.0, 0.0),
            max_points: 4,
            z_crop: None,
        }
    }

    #[test]
    fn velocity_error_examples() {
        assert_eq!(velocity_error([1.0, 0.0], [1.0, 0.0]), 0.0);
        assert_eq!(velocity_error([0.0, 0.0], [2.0, 0.0]), 2.0);
        assert_eq!(velocity_error([1.0, 1.0], [0.0, 0.0]), 1.0);
    }

    #[test]
    fn score_examples() {
        let p = ScoreParams { eta: 2.0, v_th: 0.5, constant_tau: None };
        // v_error = 0.5 exactly
        assert_eq!(traversability_score([1.0, 0.0], [0.0, 0.0], &p), 0.5);
        // v_error = 1.5, sigma(-2) = 0.11920292...
        let s = traversability_score([0.0, 0.0], [3f64.sqrt(), 0.0], &p);
        assert!((s - 0.1192).abs() < 1e-4);
        let c = ScoreParams::constant(1.0);
        assert_eq!(traversability_score([0.0, 0.0], [9.0, 9.0], &c), 1.0);
    }

    #[test]
    fn window_bounds() {
        let traj: Vec<TrajectorySample> = (0..5)
            .map(|k| TrajectorySample { time: k as f64, position: [k as f64, 0.0], ..Default::default() })
            .collect();
        let w = build_window(&traj, 2, 0, &ScoreParams::default()).unwrap();
        assert_eq!(w.entries.len(), 1);
        assert_eq!(w.entries[0].0, [2.0, 0.0]);
        assert!(matches!(
            build_window(&traj, 3, 4, &ScoreParams::default()),
            Err(Error::WindowOutOfRange { .. })
        ));
        assert_eq!(build_window(&traj, 0, 4, &ScoreParams::default()).unwrap().entries.len(), 5);
    }

    #[test]
    fn perfect_tracking_window() {
        let p = ScoreParams::default();
        let traj: Vec<TrajectorySample> = (0..20)
            .map(|k| TrajectorySample {
                time: k as f64 * 0.1,
                position: [k as f64 * 0.1, 0.0],
                v_actual: [1.0, 0.0],
                v_cmd: [1.0, 0.0],
            })
            .collect();
        let w = build_window(&traj, 3, 10, &p).unwrap();
        assert_eq!(w.entries.len(), 11);
        let expected = 1.0 / (1.0 + (-p.eta * p.v_th).exp());
        assert!(w.entries.iter().all(|e| (e.1 - expected).abs() < 1e-15));
    }

    #[test]
    fn rasterize_examples() {
        let g = grid();
        let w = SupervisionWindow { entries: vec![([0.2, 0.2], 0.4), ([0.7, 0.9], 0.8)], window_size: 1 };
        let s = rasterize(&w, &g);
        assert!((s.get(0, 0) - 0.6).abs() < 1e-15);
        assert_eq!(s.visited_count(), 1);
        assert!(rasterize(&SupervisionWindow::default(), &g).values.iter().all(|v| *v == UNVISITED));
        let out = SupervisionWindow { entries: vec![([4.0, 1.0], 0.5)], window_size: 0 };
        assert!(rasterize(&out, &g).values.iter().all(|v| *v == UNVISITED));
    }

    #[test]
    fn csv_round_trip_and_constant_mode() {
        let dir = tempfile::tempdir().unwrap();
        let traj: Vec<TrajectorySample> = (0..4)
            .map(|k| TrajectorySample {
                time: k as f64 * 0.1,
                position: [k as f64, -0.3],
                v_actual: [0.9, 0.1],
                v_cmd: [1.0, 0.0],
            })
            .collect();
        let p = dir.path().join("t.csv");
        write_trajectory_csv(&traj, true, &p).unwrap();
        let (back, has_vel) = read_trajectory_csv(&p).unwrap();
        assert!(has_vel);
        assert_eq!(back, traj);

        let p2 = dir.path().join("pos.csv");
        std::fs::write(&p2, "time,x,y\n0,1,2\n0.5,1.5,2\n").unwrap();
        let (back, has_vel) = read_trajectory_csv(&p2).unwrap();
        assert!(!has_vel);
        assert_eq!(back[1].position, [1.5, 2.0]);

        let p3 = dir.path().join("bad.csv");
        std::fs::write(&p3, "time,x,y\n1,0,0\n1,0,0\n").unwrap();
        assert!(read_trajectory_csv(&p3).is_err());
    }

    proptest! {
        #[test]
        fn score_strictly_decreasing(a in 0.0..5.0f64, b in 0.0..5.0f64) {
            let p = ScoreParams::default();
            let sa = traversability_score([a.sqrt() * 2f64.sqrt(), 0.0], [0.0, 0.0], &p);
            let sb = traversability_score([b.sqrt() * 2f64.sqrt(), 0.0], [0.0, 0.0], &p);
            prop_assert!(sa > 0.0 && sa < 1.0);
            if a < b - 1e-9 { prop_assert!(sa > sb); }
        }

        #[test]
        fn rasterize_properties(entries in prop::collection::vec(((-1.0..5.0f64, -1.0..5.0f64), 0.0..=1.0f64), 0..30)) {
            let g = grid();
            let w = SupervisionWindow {
                entries: entries.iter().map(|((x, y), t)| ([*x, *y], *t)).collect(),
                window_size: entries.len(),
            };
            let s = rasterize(&w, &g);
            prop_assert!(s.visited_count() <= w.entries.len());
            prop_assert!(s.values.iter().all(|v| *v == UNVISITED || (0.0..=1.0).contains(v)));
            let mut rev = w.clone();
            rev.entries.reverse();
            let r = rasterize(&rev, &g);
            for (a, b) in s.values.iter().zip(&r.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

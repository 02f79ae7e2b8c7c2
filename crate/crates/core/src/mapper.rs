//! Traversability maps, thresholded costmaps and their file formats.
//!
//! Costmaps are written as a binary PGM (free 254, occupied 0, unknown 205)
//! with a YAML sidecar; score maps as a CSV grid whose three header lines
//! carry the dimensions, resolution and origin.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bev::{voxelize_pillars, GridConfig};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::hypersphere::Hypersphere;
use crate::nn::TravNet;

pub const PGM_FREE: u8 = 254;
pub const PGM_OCCUPIED: u8 = 0;
pub const PGM_UNKNOWN: u8 = 205;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-cell scores in `[0, 1]`; `scores[k]` is meaningful only where
/// `unknown[k]` is false (it holds 0 otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct TraversabilityMap {
    pub grid: GridConfig,
    pub scores: Vec<f64>,
    pub unknown: Vec<bool>,
    /// Pose `(x, y, yaw)` of the map frame.
    pub pose: [f64; 3],
}

impl TraversabilityMap {
    pub fn empty(grid: GridConfig) -> Self {
        let n = grid.num_cells();
        Self { grid, scores: vec![0.0; n], unknown: vec![true; n], pose: [0.0; 3] }
    }

    pub fn score(&self, i: usize, j: usize) -> Option<f64> {
        let k = self.grid.flat(i, j);
        (!self.unknown[k]).then_some(self.scores[k])
    }

    pub fn known_count(&self) -> usize {
        self.unknown.iter().filter(|u| !**u).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostCell {
    Free,
    Occupied,
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Costmap {
    pub grid: GridConfig,
    pub cells: Vec<CostCell>,
    pub threshold: f64,
    pub pose: [f64; 3],
}

impl Costmap {
    pub fn get(&self, i: usize, j: usize) -> CostCell {
        self.cells[self.grid.flat(i, j)]
    }

    pub fn count(&self, c: CostCell) -> usize {
        self.cells.iter().filter(|x| **x == c).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapOptions {
    /// Force the score of cells outside the hypersphere to 0.
    pub anomaly_override: bool,
    /// Pillar subsampling seed.
    pub seed: u64,
}

/// Eval-mode regression scores for every occupied cell of `cloud`.
pub fn infer_map(net: &TravNet, sphere: &Hypersphere, cloud: &PointCloud, grid: &GridConfig, opts: MapOptions) -> Result<TraversabilityMap> {
    grid.validate()?;
    let mut map = TraversabilityMap::empty(*grid);
    let pillars = voxelize_pillars(cloud, grid, opts.seed);
    if pillars.cells.is_empty() {
        return Ok(map);
    }
    let inf = net.infer(&pillars)?;
    let dim = inf.latents.cols();
    for (k, &c) in inf.cells.iter().enumerate() {
        let s = inf.scores[k];
        if !s.is_finite() {
            return Err(Error::Numeric(format!("non-finite score in cell {c}")));
        }
        let anomalous = opts.anomaly_override && !sphere.is_normal(&inf.latents.data[k * dim..(k + 1) * dim]);
        map.scores[c] = if anomalous { 0.0 } else { s };
        map.unknown[c] = false;
    }
    Ok(map)
}

/// `score >= threshold` is free, below is occupied, unknown stays unknown.
pub fn to_costmap(map: &TraversabilityMap, threshold: f64) -> Result<Costmap> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("costmap threshold {threshold} outside [0, 1]")));
    }
    let cells = map
        .scores
        .iter()
        .zip(&map.unknown)
        .map(|(&s, &u)| match (u, s >= threshold) {
            (true, _) => CostCell::Unknown,
            (false, true) => CostCell::Free,
            (false, false) => CostCell::Occupied,
        })
        .collect();
    Ok(Costmap { grid: map.grid, cells, threshold, pose: map.pose })
}

fn yaml_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("yaml")
}

/// Writes `path` (PGM, top image row = highest y) and the YAML sidecar
/// next to it; returns the sidecar path.
pub fn write_costmap(map: &Costmap, path: &Path) -> Result<PathBuf> {
    let (h, w) = (map.grid.height_cells, map.grid.width_cells);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in (0..h).rev() {
        for j in 0..w {
            bytes.push(match map.get(i, j) {
                CostCell::Free => PGM_FREE,
                CostCell::Occupied => PGM_OCCUPIED,
                CostCell::Unknown => PGM_UNKNOWN,
            });
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let image = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut y = String::new();
    let _ = writeln!(y, "image: {image}");
    let _ = writeln!(y, "resolution: {}", map.grid.resolution);
    let _ = writeln!(y, "origin: [{}, {}, 0.0]", map.grid.origin.0, map.grid.origin.1);
    let _ = writeln!(y, "negate: 0");
    let _ = writeln!(y, "occupied_thresh: 0.65");
    let _ = writeln!(y, "free_thresh: 0.196");
    let _ = writeln!(y, "score_threshold: {}", map.threshold);
    let _ = writeln!(y, "frame_pose: [{}, {}, {}]", map.pose[0], map.pose[1], map.pose[2]);
    let sidecar = yaml_path(path);
    fs::write(&sidecar, y).map_err(|e| Error::io(&sidecar, e))?;
    Ok(sidecar)
}

fn yaml_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(':')).map(str::trim))
}

fn yaml_list(s: &str) -> Option<Vec<f64>> {
    s.trim().strip_prefix('[')?.strip_suffix(']')?.split(',').map(|v| v.trim().parse().ok()).collect()
}

/// Reads a costmap written by [`write_costmap`].
pub fn read_costmap(path: &Path, max_points: usize) -> Result<Costmap> {
    let sidecar = yaml_path(path);
    let yaml = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let bad = |m: &str| Error::format(&sidecar, m);
    let resolution: f64 = yaml_value(&yaml, "resolution").and_then(|v| v.parse().ok()).ok_or_else(|| bad("resolution"))?;
    let origin = yaml_value(&yaml, "origin").and_then(yaml_list).filter(|o| o.len() >= 2).ok_or_else(|| bad("origin"))?;
    let threshold: f64 = yaml_value(&yaml, "score_threshold").and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_THRESHOLD);
    let pose = yaml_value(&yaml, "frame_pose").and_then(yaml_list).filter(|p| p.len() == 3).map_or([0.0; 3], |p| [p[0], p[1], p[2]]);

    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(path, "not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, "bad PGM dimension"));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| Error::format(path, "PGM data truncated"))?;
    let grid = GridConfig { height_cells: h, width_cells: w, resolution, origin: (origin[0], origin[1]), max_points, z_crop: None };
    let mut cells = vec![CostCell::Unknown; w * h];
    for r in 0..h {
        let i = h - 1 - r;
        for j in 0..w {
            cells[grid.flat(i, j)] = match data[r * w + j] {
                PGM_FREE => CostCell::Free,
                PGM_OCCUPIED => CostCell::Occupied,
                PGM_UNKNOWN => CostCell::Unknown,
                v => return Err(Error::format(path, format!("unexpected PGM value {v}"))),
            };
        }
    }
    Ok(Costmap { grid, cells, threshold, pose })
}

/// CSV grid: `dims,H,W` / `resolution,r` / `origin,x,y`, then `H` rows of
/// `W` values in increasing row order; `nan` marks unknown cells.
pub fn write_grid_csv(values: &[f64], grid: &GridConfig, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut out = String::new();
    let _ = writeln!(out, "dims,{},{}", grid.height_cells, grid.width_cells);
    let _ = writeln!(out, "resolution,{}", grid.resolution);
    let _ = writeln!(out, "origin,{},{}", grid.origin.0, grid.origin.1);
    for row in values.chunks(grid.width_cells) {
        let line: Vec<String> = row.iter().map(|v| if v.is_nan() { "nan".into() } else { v.to_string() }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_grid_csv(path: &Path, max_points: usize) -> Result<(GridConfig, Vec<f64>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut header = |key: &str| -> Result<Vec<String>> {
        let line = lines.next().transpose().map_err(|e| Error::io(path, e))?.unwrap_or_default();
        let parts: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if parts.first().map(String::as_str) != Some(key) {
            return Err(Error::format(path, format!("expected `{key}` header line")));
        }
        Ok(parts[1..].to_vec())
    };
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format(path, format!("bad number `{s}`")));
    let dims = header("dims")?;
    let res = header("resolution")?;
    let origin = header("origin")?;
    if dims.len() != 2 || res.len() != 1 || origin.len() != 2 {
        return Err(Error::format(path, "malformed header"));
    }
    let h: usize = dims[0].parse().map_err(|_| Error::format(path, "bad dims"))?;
    let w: usize = dims[1].parse().map_err(|_| Error::format(path, "bad dims"))?;
    let grid = GridConfig {
        height_cells: h,
        width_cells: w,
        resolution: num(&res[0])?,
        origin: (num(&origin[0])?, num(&origin[1])?),
        max_points,
        z_crop: None,
    };
    let mut values = Vec::with_capacity(h * w);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != w {
            return Err(Error::format(path, format!("row of {} values, expected {w}", row.len())));
        }
        for v in row {
            values.push(if v.trim() == "nan" { f64::NAN } else { num(v.trim())? });
        }
    }
    if values.len() != h * w {
        return Err(Error::format(path, format!("{} values, expected {}", values.len(), h * w)));
    }
    Ok((grid, values))
}

pub fn write_map_csv(map: &TraversabilityMap, path: &Path) -> Result<()> {
    let values: Vec<f64> = map.scores.iter().zip(&map.unknown).map(|(&s, &u)| if u { f64::NAN } else { s }).collect();
    write_grid_csv(&values, &map.grid, path)
}

pub fn read_map_csv(path: &Path, max_points: usize) -> Result<TraversabilityMap> {
    let (grid, values) = read_grid_csv(path, max_points)?;
    let unknown: Vec<bool> = values.iter().map(|v| v.is_nan()).collect();
    let scores = values.iter().map(|v| if v.is_nan() { 0.0 } else { *v }).collect();
    Ok(TraversabilityMap { grid, scores, unknown, pose: [0.0; 3] })
}

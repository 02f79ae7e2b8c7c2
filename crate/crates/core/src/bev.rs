//! Bird's-eye-view grid geometry and pillar voxelization.
//!
//! Every occupied cell becomes a pillar of at most `max_points` rows, each
//! row being `[x_l, y_l, z, x_c, y_c, z_c, sigma_z]`:
//!
//! * `x_l, y_l`: offset from the cell's geometric center,
//! * `z`: absolute height,
//! * `x_c, y_c, z_c`: offset from the mean of all points assigned to the cell,
//! * `sigma_z`: population standard deviation of z over the cell.
//!
//! Cell statistics always use the full assignment, even when the cell holds
//! more than `max_points` points and the kept rows are subsampled.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};

pub const POINT_FEATURES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Rows, indexed along y.
    pub height_cells: usize,
    /// Columns, indexed along x.
    pub width_cells: usize,
    pub resolution: f64,
    /// World position of the lower corner of cell (0, 0).
    pub origin: (f64, f64),
    pub max_points: usize,
    #[serde(default)]
    pub z_crop: Option<(f64, f64)>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig::training()
    }
}

impl GridConfig {
    /// Square grid of roughly `size_m` meters centered on the frame origin.
    pub fn centered(size_m: f64, resolution: f64, max_points: usize) -> Self {
        let cells = (size_m / resolution).round().max(1.0) as usize;
        let half = cells as f64 * resolution / 2.0;
        GridConfig {
            height_cells: cells,
            width_cells: cells,
            resolution,
            origin: (-half, -half),
            max_points,
            z_crop: None,
        }
    }

    /// 12 x 12 m at 0.15 m (80 x 80 cells), M = 32.
    pub fn training() -> Self {
        GridConfig::centered(12.0, 0.15, 32)
    }

    /// 8 x 8 m at 0.15 m, M = 32.
    pub fn mapping() -> Self {
        GridConfig::centered(8.0, 0.15, 32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height_cells == 0 || self.width_cells == 0 || self.max_points == 0 {
            return Err(Error::Config("grid dimensions and max_points must be >= 1".into()));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(Error::Config("grid.resolution must be > 0".into()));
        }
        if !(self.origin.0.is_finite() && self.origin.1.is_finite()) {
            return Err(Error::Config("grid.origin must be finite".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    pub fn flat(&self, i: usize, j: usize) -> usize {
        i * self.width_cells + j
    }

    pub fn unflat(&self, idx: usize) -> (usize, usize) {
        (idx / self.width_cells, idx % self.width_cells)
    }

    /// `(row, col)` of the cell holding planar position `(x, y)`; cells are
    /// half-open, so the upper extent is outside.
    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((y - self.origin.1) / self.resolution).floor();
        let fj = ((x - self.origin.0) / self.resolution).floor();
        if !(fi >= 0.0 && fj >= 0.0) || fi >= self.height_cells as f64 || fj >= self.width_cells as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Geometric center `(x, y)` of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + (j as f64 + 0.5) * self.resolution,
            self.origin.1 + (i as f64 + 0.5) * self.resolution,
        )
    }

    fn keeps_height(&self, z: f64) -> bool {
        match self.z_crop {
            Some((lo, hi)) => z >= lo && z <= hi,
            None => true,
        }
    }
}

pub fn cell_of(point: &Point3, grid: &GridConfig) -> Option<(usize, usize)> {
    grid.cell_of_xy(point.x, point.y)
}

/// Flat cell index of every point (`None` outside the grid or z crop).
pub fn assign_cells(cloud: &PointCloud, grid: &GridConfig) -> Vec<Option<usize>> {
    cloud
        .points
        .iter()
        .map(|p| {
            if !grid.keeps_height(p.z) {
                return None;
            }
            grid.cell_of_xy(p.x, p.y).map(|(i, j)| grid.flat(i, j))
        })
        .collect()
}

/// Occupied pillars only: the rows of each occupied cell stored contiguously.
///
/// This is the representation the network consumes; [`PillarTensor`] is the
/// dense, zero-padded equivalent.
#[derive(Debug, Clone, PartialEq)]
pub struct Pillars {
    pub grid: GridConfig,
    /// Flat cell index of each pillar, ascending.
    pub cells: Vec<usize>,
    /// Row range of pillar `k` is `offsets[k]..offsets[k + 1]`.
    pub offsets: Vec<usize>,
    pub rows: Vec<[f64; POINT_FEATURES]>,
}

impl Pillars {
    pub fn num_pillars(&self) -> usize {
        self.cells.len()
    }

    pub fn pillar_rows(&self, k: usize) -> &[[f64; POINT_FEATURES]] {
        &self.rows[self.offsets[k]..self.offsets[k + 1]]
    }

    /// Occupancy mask over all grid cells.
    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.grid.num_cells()];
        for &c in &self.cells {
            occ[c] = true;
        }
        occ
    }

    pub fn to_dense(&self) -> PillarTensor {
        let g = self.grid;
        let m = g.max_points;
        let mut t = PillarTensor {
            grid: g,
            features: vec![0.0; g.num_cells() * m * POINT_FEATURES],
            counts: vec![0; g.num_cells()],
        };
        for (k, &cell) in self.cells.iter().enumerate() {
            let rows = self.pillar_rows(k);
            t.counts[cell] = rows.len() as u32;
            for (r, row) in rows.iter().enumerate() {
                let base = (cell * m + r) * POINT_FEATURES;
                t.features[base..base + POINT_FEATURES].copy_from_slice(row);
            }
        }
        t
    }
}

/// Dense `H x W x M x 7` pillar tensor with per-cell valid-row counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub grid: GridConfig,
    pub features: Vec<f64>,
    pub counts: Vec<u32>,
}

impl PillarTensor {
    pub fn shape(&self) -> [usize; 4] {
        [self.grid.height_cells, self.grid.width_cells, self.grid.max_points, POINT_FEATURES]
    }

    pub fn count(&self, i: usize, j: usize) -> usize {
        self.counts[self.grid.flat(i, j)] as usize
    }

    pub fn row(&self, i: usize, j: usize, m: usize) -> &[f64] {
        let base = (self.grid.flat(i, j) * self.grid.max_points + m) * POINT_FEATURES;
        &self.features[base..base + POINT_FEATURES]
    }

    pub fn to_pillars(&self) -> Pillars {
        let g = self.grid;
        let mut out = Pillars {
            grid: g,
            cells: Vec::new(),
            offsets: vec![0],
            rows: Vec::new(),
        };
        for cell in 0..g.num_cells() {
            let n = self.counts[cell] as usize;
            if n == 0 {
                continue;
            }
            out.cells.push(cell);
            for r in 0..n {
                let base = (cell * g.max_points + r) * POINT_FEATURES;
                let mut row = [0.0; POINT_FEATURES];
                row.copy_from_slice(&self.features[base..base + POINT_FEATURES]);
                out.rows.push(row);
            }
            out.offsets.push(out.rows.len());
        }
        out
    }
}

/// Voxelizes a cloud into the dense pillar tensor.
pub fn voxelize(cloud: &PointCloud, grid: &GridConfig, seed: u64) -> PillarTensor {
    voxelize_pillars(cloud, grid, seed).to_dense()
}

/// Voxelizes a cloud into occupied pillars only.
pub fn voxelize_pillars(cloud: &PointCloud, grid: &GridConfig, seed: u64) -> Pillars {
    let cells = assign_cells(cloud, grid);
    let n_cells = grid.num_cells();

    // counting sort by cell, stable in input order
    let mut start = vec![0usize; n_cells + 1];
    for c in cells.iter().flatten() {
        start[c + 1] += 1;
    }
    for k in 0..n_cells {
        start[k + 1] += start[k];
    }
    let mut fill = start.clone();
    let mut order = vec![0usize; start[n_cells]];
    for (idx, c) in cells.iter().enumerate() {
        if let Some(c) = *c {
            order[fill[c]] = idx;
            fill[c] += 1;
        }
    }

    let m = grid.max_points;
    let mut out = Pillars {
        grid: *grid,
        cells: Vec::new(),
        offsets: vec![0],
        rows: Vec::with_capacity(order.len().min(n_cells * m)),
    };
    let mut kept: Vec<usize> = Vec::with_capacity(m);
    for cell in 0..n_cells {
        let members = &order[start[cell]..start[cell + 1]];
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
        for &p in members {
            let p = &cloud.points[p];
            sx += p.x;
            sy += p.y;
            sz += p.z;
        }
        let (mx, my, mz) = (sx / n, sy / n, sz / n);
        let var_z = members.iter().map(|&p| (cloud.points[p].z - mz).powi(2)).sum::<f64>() / n;
        let sigma_z = var_z.sqrt();

        kept.clear();
        if members.len() <= m {
            kept.extend_from_slice(members);
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut pick: Vec<usize> = sample(&mut rng, members.len(), m).into_vec();
            pick.sort_unstable();
            kept.extend(pick.into_iter().map(|k| members[k]));
        }

        let (i, j) = grid.unflat(cell);
        let (cx, cy) = grid.cell_center(i, j);
        for &p in &kept {
            let p = &cloud.points[p];
            out.rows.push([p.x - cx, p.y - cy, p.z, p.x - mx, p.y - my, p.z - mz, sigma_z]);
        }
        out.cells.push(cell);
        out.offsets.push(out.rows.len());
    }
    out
}

const PILLAR_MAGIC: &[u8; 4] = b"GSPT";
const PILLAR_VERSION: u32 = 1;

/// Writes occupied pillars in a lossless little-endian cache container.
pub fn write_pillars(p: &Pillars, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_pillars_to(p, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_pillars_to<W: Write>(p: &Pillars, w: &mut W) -> std::io::Result<()> {
    let g = &p.grid;
    w.write_all(PILLAR_MAGIC)?;
    w.write_u32::<LittleEndian>(PILLAR_VERSION)?;
    w.write_u32::<LittleEndian>(g.height_cells as u32)?;
    w.write_u32::<LittleEndian>(g.width_cells as u32)?;
    w.write_u32::<LittleEndian>(g.max_points as u32)?;
    w.write_f64::<LittleEndian>(g.resolution)?;
    w.write_f64::<LittleEndian>(g.origin.0)?;
    w.write_f64::<LittleEndian>(g.origin.1)?;
    w.write_u32::<LittleEndian>(p.num_pillars() as u32)?;
    for k in 0..p.num_pillars() {
        let rows = p.pillar_rows(k);
        w.write_u32::<LittleEndian>(p.cells[k] as u32)?;
        w.write_u32::<LittleEndian>(rows.len() as u32)?;
        for row in rows {
            for v in row {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
    }
    Ok(())
}

pub fn read_pillars(path: &Path) -> Result<Pillars> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pillars_from(&mut BufReader::new(file)).map_err(|e| Error::format(path, e.to_string()))
}

fn read_pillars_from<R: Read>(r: &mut R) -> std::io::Result<Pillars> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PILLAR_MAGIC {
        return Err(bad("bad pillar cache magic"));
    }
    if r.read_u32::<LittleEndian>()? != PILLAR_VERSION {
        return Err(bad("unsupported pillar cache version"));
    }
    let height_cells = r.read_u32::<LittleEndian>()? as usize;
    let width_cells = r.read_u32::<LittleEndian>()? as usize;
    let max_points = r.read_u32::<LittleEndian>()? as usize;
    let resolution = r.read_f64::<LittleEndian>()?;
    let origin = (r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?);
    let grid = GridConfig {
        height_cells,
        width_cells,
        resolution,
        origin,
        max_points,
        z_crop: None,
    };
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut p = Pillars {
        grid,
        cells: Vec::with_capacity(n),
        offsets: vec![0],
        rows: Vec::new(),
    };
    for _ in 0..n {
        let cell = r.read_u32::<LittleEndian>()? as usize;
        let count = r.read_u32::<LittleEndian>()? as usize;
        if cell >= grid.num_cells() || count > max_points {
            return Err(bad("pillar out of range"));
        }
        for _ in 0..count {
            let mut row = [0.0; POINT_FEATURES];
            for v in &mut row {
                *v = r.read_f64::<LittleEndian>()?;
            }
            p.rows.push(row);
        }
        p.cells.push(cell);
        p.offsets.push(p.rows.len());
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(res: f64, cells: usize, m: usize) -> GridConfig {
        GridConfig {
            height_cells: cells,
            width_cells: cells,
            resolution: res,
            origin: (0.0, 0.0),
            max_points: m,
            z_crop: None,
        }
    }

    #[test]
    fn cell_of_examples() {
        let g = grid(0.15, 10, 4);
        assert_eq!(cell_of(&Point3::new(0.0, 0.0, 5.0), &g), Some((0, 0)));
        assert_eq!(cell_of(&Point3::new(1.5, 0.2, 0.0), &g), None);
        assert_eq!(cell_of(&Point3::new(0.2, 1.5, 0.0), &g), None);
        assert_eq!(cell_of(&Point3::new(0.31, 0.16, 0.0), &g), Some((1, 2)));
        assert_eq!(cell_of(&Point3::new(-1e-9, 0.1, 0.0), &g), None);
    }

    #[test]
    fn default_grids() {
        let t = GridConfig::training();
        assert_eq!((t.height_cells, t.width_cells, t.max_points), (80, 80, 32));
        assert!((t.origin.0 + 6.0).abs() < 1e-12);
        let m = GridConfig::mapping();
        assert_eq!(m.height_cells, 53);
    }

    #[test]
    fn single_centered_point() {
        let g = grid(0.15, 4, 4);
        let (cx, cy) = g.cell_center(1, 2);
        let t = voxelize(&PointCloud::new(vec![Point3::new(cx, cy, 1.0)]), &g, 0);
        assert_eq!(t.count(1, 2), 1);
        assert_eq!(t.row(1, 2, 0), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(t.row(1, 2, 1).iter().all(|v| *v == 0.0));
        assert_eq!(t.shape(), [4, 4, 4, 7]);
    }

    #[test]
    fn two_point_statistics() {
        let g = grid(1.0, 2, 4);
        let c = PointCloud::new(vec![Point3::new(0.5, 0.5, 0.0), Point3::new(0.5, 0.5, 2.0)]);
        let t = voxelize(&c, &g, 0);
        assert_eq!(t.row(0, 0, 0)[5], -1.0);
        assert_eq!(t.row(0, 0, 1)[5], 1.0);
        assert_eq!(t.row(0, 0, 0)[6], 1.0);
        assert_eq!(t.row(0, 0, 1)[6], 1.0);
    }

    #[test]
    fn outside_cloud_is_empty() {
        let g = grid(0.15, 4, 4);
        let t = voxelize(&PointCloud::new(vec![Point3::new(-3.0, 9.0, 0.0)]), &g, 0);
        assert!(t.counts.iter().all(|c| *c == 0));
        assert!(t.features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn overflow_keeps_m_rows_but_full_statistics() {
        let g = grid(1.0, 1, 3);
        let pts: Vec<Point3> = (0..10).map(|k| Point3::new(0.5, 0.5, k as f64)).collect();
        let t = voxelize(&PointCloud::new(pts), &g, 7);
        assert_eq!(t.count(0, 0), 3);
        // population variance of 0..=9 is 99/12
        for m in 0..3 {
            let r = t.row(0, 0, m);
            assert!((r[6] - 8.25f64.sqrt()).abs() < 1e-12);
            assert!((r[5] - (r[2] - 4.5)).abs() < 1e-12);
        }
        assert_eq!(voxelize(&t_cloud(), &g, 7), voxelize(&t_cloud(), &g, 7));
    }

    fn t_cloud() -> PointCloud {
        PointCloud::new((0..50).map(|k| Point3::new(0.5, 0.5, (k * 7 % 13) as f64)).collect())
    }

    #[test]
    fn z_crop_drops_points() {
        let mut g = grid(1.0, 1, 4);
        g.z_crop = Some((-1.0, 1.0));
        let c = PointCloud::new(vec![Point3::new(0.5, 0.5, 0.0), Point3::new(0.5, 0.5, 3.0)]);
        assert_eq!(voxelize(&c, &g, 0).count(0, 0), 1);
    }

    #[test]
    fn cache_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = grid(0.5, 6, 5);
        let pts = (0..300)
            .map(|_| Point3::new(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let p = voxelize_pillars(&PointCloud::new(pts), &g, 3);
        let mut buf = Vec::new();
        write_pillars_to(&p, &mut buf).unwrap();
        assert_eq!(read_pillars_from(&mut buf.as_slice()).unwrap(), p);
        assert_eq!(p.to_dense().to_pillars(), p);
    }

    proptest! {
        #[test]
        fn row_invariants(seed in 0u64..1000, n in 0usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = grid(0.3, 8, 6);
            let pts: Vec<Point3> = (0..n)
                .map(|_| Point3::new(rng.gen_range(-0.5..2.9), rng.gen_range(-0.5..2.9), rng.gen_range(-1.0..2.0)))
                .collect();
            let cloud = PointCloud::new(pts);
            let p = voxelize_pillars(&cloud, &g, seed);
            let in_extent = assign_cells(&cloud, &g).iter().flatten().count();
            prop_assert!(p.rows.len() <= in_extent);
            for k in 0..p.num_pillars() {
                let rows = p.pillar_rows(k);
                prop_assert!(!rows.is_empty() && rows.len() <= g.max_points);
                for r in rows {
                    prop_assert!(r[0].abs() <= g.resolution / 2.0 + 1e-12);
                    prop_assert!(r[1].abs() <= g.resolution / 2.0 + 1e-12);
                    prop_assert!(r[6] >= 0.0);
                    prop_assert_eq!(r[6], rows[0][6]);
                }
            }
        }
    }
}

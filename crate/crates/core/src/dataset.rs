//! Labeled scan datasets: generation from a synthetic world, and the
//! on-disk layout shared by generated and ingested data.
//!
//! ```text
//! manifest.json          spec, anomalous classes, scan index
//! world.gspc             full labeled world cloud
//! world_labels.csv       oracle label grid of the world (0 empty, 1 normal, 2 anomalous)
//! trajectory.csv         training route (world frame)
//! test_trajectory.csv    held-out route (world frame)
//! scans/<id>.ply         labeled scan cloud in the robot frame
//! scans/<id>.csv         trajectory window in the robot frame
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bev::GridConfig;
use crate::error::{Error, Result};
use crate::eval::CellLabel;
use crate::geom::io::{read_cloud, write_cloud};
use crate::geom::PointCloud;
use crate::mapper::write_grid_csv;
use crate::supervision::{read_trajectory_csv, write_trajectory_csv, TrajectorySample};
use crate::synth::{extract_scan, generate_trajectory, generate_world, local_window, oracle_labels, pose_at, RobotProfile, World, WorldSpec, CLASS_NAMES};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub world: WorldSpec,
    pub profile: RobotProfile,
    /// Scans taken along the training route.
    pub scans: usize,
    /// Scans taken along a separate held-out route.
    pub test_scans: usize,
    /// Trajectory samples between consecutive scans.
    pub scan_spacing: usize,
    /// Supervision window length `n` (the window holds `n + 1` samples).
    pub window: usize,
    /// Half side of the square crop kept around each pose.
    pub scan_radius: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            profile: RobotProfile::wheeled(),
            scans: 40,
            test_scans: 10,
            scan_spacing: 20,
            window: 50,
            scan_radius: 8.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.profile.validate()?;
        if self.scans == 0 || self.scan_spacing == 0 || self.window == 0 {
            return Err(Error::Spec("scans, scan_spacing and window must be positive".into()));
        }
        if !(self.scan_radius > 0.0) {
            return Err(Error::Spec("scan_radius must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub id: String,
    pub split: Split,
    pub cloud: String,
    pub trajectory: String,
    /// World pose `(x, y, ground z, heading)` of the scan frame.
    pub pose: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub anomalous_classes: Vec<u16>,
    /// Present for generated datasets.
    #[serde(default)]
    pub spec: Option<DatasetSpec>,
    pub scans: Vec<ScanEntry>,
}

/// One scan in its own frame with the trajectory window starting at the
/// scan pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub id: String,
    pub split: Split,
    pub cloud: PointCloud,
    pub trajectory: Vec<TrajectorySample>,
    pub pose: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub anomalous_classes: Vec<u16>,
    pub spec: Option<DatasetSpec>,
    pub scans: Vec<Scan>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Scan> {
        self.scans.iter().filter(|s| s.split == split).collect()
    }
}

/// A generated dataset together with the world it came from.
#[derive(Debug, Clone)]
pub struct Generated {
    pub world: World,
    pub train_route: Vec<TrajectorySample>,
    pub test_route: Vec<TrajectorySample>,
    pub dataset: Dataset,
}

fn route_scans(world: &World, route: &[TrajectorySample], spec: &DatasetSpec, count: usize, split: Split) -> Vec<Scan> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    (0..count)
        .map(|k| {
            let t = k * spec.scan_spacing;
            let pose = pose_at(world, route, t);
            Scan {
                id: format!("{prefix}_{k:04}"),
                split,
                cloud: extract_scan(world, &pose, spec.scan_radius),
                trajectory: local_window(route, &pose, t, spec.window),
                pose: [pose.position[0], pose.position[1], pose.ground, pose.heading],
            }
        })
        .collect()
}

fn route_length(spec: &DatasetSpec, count: usize) -> usize {
    count.saturating_sub(1) * spec.scan_spacing + spec.window + 1
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Generated> {
    spec.validate()?;
    let world = generate_world(&spec.world)?;
    let train_route = generate_trajectory(&world, &spec.profile, route_length(spec, spec.scans), spec.seed)?;
    let test_route = if spec.test_scans > 0 {
        generate_trajectory(&world, &spec.profile, route_length(spec, spec.test_scans), spec.seed.wrapping_add(0x5EED))?
    } else {
        Vec::new()
    };
    let mut scans = route_scans(&world, &train_route, spec, spec.scans, Split::Train);
    scans.extend(route_scans(&world, &test_route, spec, spec.test_scans, Split::Test));
    let dataset = Dataset { anomalous_classes: spec.profile.anomalous_classes(), spec: Some(spec.clone()), scans };
    Ok(Generated { world, train_route, test_route, dataset })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes the full generated layout into `dir`.
pub fn write_generated(gen: &Generated, dir: &Path, oracle_grid: &GridConfig) -> Result<()> {
    write_dataset(&gen.dataset, dir)?;
    write_cloud(&gen.world.cloud, &dir.join("world.gspc"))?;
    write_trajectory_csv(&gen.train_route, true, &dir.join("trajectory.csv"))?;
    if !gen.test_route.is_empty() {
        write_trajectory_csv(&gen.test_route, true, &dir.join("test_trajectory.csv"))?;
    }
    let profile = gen.dataset.spec.as_ref().map_or_else(RobotProfile::wheeled, |s| s.profile.clone());
    let oracle = oracle_labels(&gen.world.cloud, &profile, oracle_grid)?;
    let values: Vec<f64> = oracle
        .cells
        .iter()
        .map(|c| match c {
            CellLabel::Empty => 0.0,
            CellLabel::Normal => 1.0,
            CellLabel::Anomalous => 2.0,
        })
        .collect();
    write_grid_csv(&values, oracle_grid, &dir.join("world_labels.csv"))
}

/// Grid covering the whole world at `resolution`.
pub fn world_grid(spec: &WorldSpec, resolution: f64, max_points: usize) -> GridConfig {
    let n = (spec.extent / resolution).ceil() as usize;
    GridConfig { height_cells: n, width_cells: n, resolution, origin: (0.0, 0.0), max_points, z_crop: None }
}

/// Writes the manifest and per-scan files.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let scan_dir = dir.join("scans");
    create_dir(&scan_dir)?;
    let mut entries = Vec::with_capacity(ds.scans.len());
    for s in &ds.scans {
        let cloud = format!("scans/{}.ply", s.id);
        let trajectory = format!("scans/{}.csv", s.id);
        write_cloud(&s.cloud, &dir.join(&cloud))?;
        write_trajectory_csv(&s.trajectory, true, &dir.join(&trajectory))?;
        entries.push(ScanEntry { id: s.id.clone(), split: s.split, cloud, trajectory, pose: s.pose });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        anomalous_classes: ds.anomalous_classes.clone(),
        spec: ds.spec.clone(),
        scans: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("dataset version {} is not supported", m.version)));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let mut scans = Vec::with_capacity(m.scans.len());
    for e in &m.scans {
        let cloud = read_cloud(&dir.join(&e.cloud))?;
        let tpath: PathBuf = dir.join(&e.trajectory);
        let (trajectory, has_vel) = read_trajectory_csv(&tpath)?;
        if !has_vel {
            return Err(Error::format(&tpath, "scan trajectories need velocity columns"));
        }
        scans.push(Scan { id: e.id.clone(), split: e.split, cloud, trajectory, pose: e.pose });
    }
    Ok(Dataset { anomalous_classes: m.anomalous_classes, spec: m.spec, scans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ObstacleCounts;

    pub(crate) fn tiny_spec() -> DatasetSpec {
        DatasetSpec {
            world: WorldSpec {
                extent: 30.0,
                density: 8.0,
                hills: 3,
                obstacles: ObstacleCounts { rocks: 8, low_bushes: 8, high_bushes: 8, trees: 3 },
                ..Default::default()
            },
            scans: 4,
            test_scans: 2,
            window: 30,
            ..Default::default()
        }
    }

    #[test]
    fn generation_counts_and_frames() {
        let g = generate_dataset(&tiny_spec()).unwrap();
        assert_eq!(g.dataset.split(Split::Train).len(), 4);
        assert_eq!(g.dataset.split(Split::Test).len(), 2);
        for s in &g.dataset.scans {
            assert_eq!(s.trajectory.len(), 31);
            assert!(s.trajectory[0].position[0].abs() < 1e-9);
            assert!(s.cloud.labels.is_some());
        }
    }

    #[test]
    fn write_read_round_trip() {
        let g = generate_dataset(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let grid = world_grid(&g.world.spec, 0.5, 32);
        write_generated(&g, dir.path(), &grid).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.anomalous_classes, g.dataset.anomalous_classes);
        assert_eq!(back.spec, g.dataset.spec);
        assert_eq!(back.scans.len(), g.dataset.scans.len());
        for (a, b) in back.scans.iter().zip(&g.dataset.scans) {
            assert_eq!(a.cloud.labels, b.cloud.labels);
            assert_eq!(a.cloud.len(), b.cloud.len());
            assert_eq!(a.trajectory.len(), b.trajectory.len());
        }
        assert!(dir.path().join("world_labels.csv").exists());
    }

    #[test]
    fn profiles_share_geometry() {
        let a = generate_dataset(&tiny_spec()).unwrap();
        let b = generate_dataset(&DatasetSpec { profile: RobotProfile::legged(), ..tiny_spec() }).unwrap();
        assert_eq!(a.world.cloud, b.world.cloud);
        assert_ne!(a.dataset.anomalous_classes, b.dataset.anomalous_classes);
    }
}

//! Ground-truth label projection, grid prediction and precision/recall/F1.

use serde::{Deserialize, Serialize};

use crate::bev::{assign_cells, voxelize_pillars, GridConfig, Pillars};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::hypersphere::Hypersphere;
use crate::nn::TravNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellLabel {
    Empty,
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub grid: GridConfig,
    pub cells: Vec<CellLabel>,
}

impl LabelGrid {
    pub fn get(&self, i: usize, j: usize) -> CellLabel {
        self.cells[self.grid.flat(i, j)]
    }

    pub fn count(&self, label: CellLabel) -> usize {
        self.cells.iter().filter(|c| **c == label).count()
    }
}

/// A cell holding any point of an anomalous class is anomalous; other
/// occupied cells are normal.
pub fn project_labels(cloud: &PointCloud, anomalous: &[u16], grid: &GridConfig) -> Result<LabelGrid> {
    let labels = cloud.labels.as_ref().ok_or(Error::MissingLabels)?;
    let mut cells = vec![CellLabel::Empty; grid.num_cells()];
    for (cell, label) in assign_cells(cloud, grid).into_iter().zip(labels) {
        if let Some(c) = cell {
            if anomalous.contains(label) {
                cells[c] = CellLabel::Anomalous;
            } else if cells[c] == CellLabel::Empty {
                cells[c] = CellLabel::Normal;
            }
        }
    }
    Ok(LabelGrid { grid: grid.clone(), cells })
}

/// Eval-mode classification of every occupied cell of `pillars` against
/// `sphere`.
pub fn predict_pillars(net: &TravNet, sphere: &Hypersphere, pillars: &Pillars) -> Result<LabelGrid> {
    let inf = net.infer(pillars)?;
    let dim = inf.latents.cols();
    let mut cells = vec![CellLabel::Empty; pillars.grid.num_cells()];
    for (k, &c) in inf.cells.iter().enumerate() {
        let z = &inf.latents.data[k * dim..(k + 1) * dim];
        cells[c] = if sphere.is_normal(z) { CellLabel::Normal } else { CellLabel::Anomalous };
    }
    Ok(LabelGrid { grid: pillars.grid.clone(), cells })
}

pub fn predict_grid(net: &TravNet, sphere: &Hypersphere, cloud: &PointCloud, grid: &GridConfig, seed: u64) -> Result<LabelGrid> {
    predict_pillars(net, sphere, &voxelize_pillars(cloud, grid, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub evaluated_cells: u64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { precision, recall, f1, tp, fp, fn_, tn, evaluated_cells: tp + fp + fn_ + tn }
    }

    /// Pools confusion counts (micro average).
    pub fn micro(all: &[Metrics]) -> Metrics {
        let s = |f: fn(&Metrics) -> u64| all.iter().map(f).sum::<u64>();
        Metrics::from_counts(s(|m| m.tp), s(|m| m.fp), s(|m| m.fn_), s(|m| m.tn))
    }

    /// Averages per-item ratios (macro average); counts are pooled.
    pub fn macro_avg(all: &[Metrics]) -> Metrics {
        let mut m = Metrics::micro(all);
        if !all.is_empty() {
            let n = all.len() as f64;
            m.precision = all.iter().map(|x| x.precision).sum::<f64>() / n;
            m.recall = all.iter().map(|x| x.recall).sum::<f64>() / n;
            m.f1 = all.iter().map(|x| x.f1).sum::<f64>() / n;
        }
        m
    }
}

/// Confusion counts with normal as the positive class. Cells empty in
/// either grid are skipped.
pub fn score(pred: &LabelGrid, truth: &LabelGrid) -> Result<Metrics> {
    if pred.cells.len() != truth.cells.len()
        || pred.grid.height_cells != truth.grid.height_cells
        || pred.grid.width_cells != truth.grid.width_cells
    {
        return Err(Error::ShapeMismatch("prediction and truth grids differ in size".into()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, t) in pred.cells.iter().zip(&truth.cells) {
        match (p, t) {
            (CellLabel::Empty, _) | (_, CellLabel::Empty) => {}
            (CellLabel::Normal, CellLabel::Normal) => tp += 1,
            (CellLabel::Normal, CellLabel::Anomalous) => fp += 1,
            (CellLabel::Anomalous, CellLabel::Normal) => fn_ += 1,
            (CellLabel::Anomalous, CellLabel::Anomalous) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point3;
    use crate::nn::NetworkConfig;
    use proptest::prelude::*;

    fn grid3() -> GridConfig {
        GridConfig { height_cells: 3, width_cells: 3, resolution: 1.0, origin: (0.0, 0.0), max_points: 8, z_crop: None }
    }

    fn labels(cells: &[u8]) -> LabelGrid {
        let c = cells
            .iter()
            .map(|v| match v {
                0 => CellLabel::Empty,
                1 => CellLabel::Normal,
                _ => CellLabel::Anomalous,
            })
            .collect();
        let n = (cells.len() as f64).sqrt() as usize;
        LabelGrid { grid: GridConfig { height_cells: n, width_cells: n, ..grid3() }, cells: c }
    }

    #[test]
    fn projection_rules() {
        let mut pts = Vec::new();
        let mut lab = Vec::new();
        for k in 0..100 {
            pts.push(Point3::new(0.5, 0.5, k as f64 * 0.01));
            lab.push(if k == 37 { 4 } else { 0 });
        }
        pts.push(Point3::new(1.5, 0.5, 0.0));
        lab.push(0);
        let cloud = PointCloud::with_labels(pts, lab);
        let g = project_labels(&cloud, &[4], &grid3()).unwrap();
        assert_eq!(g.get(0, 0), CellLabel::Anomalous);
        assert_eq!(g.get(0, 1), CellLabel::Normal);
        assert_eq!(g.get(2, 2), CellLabel::Empty);
        assert!(matches!(project_labels(&PointCloud::default(), &[4], &grid3()), Err(Error::MissingLabels)));
    }

    #[test]
    fn score_examples() {
        let m = score(&labels(&[1, 2, 1, 1, 2, 0, 1, 1, 2]), &labels(&[1, 2, 1, 1, 2, 0, 1, 1, 2])).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        // tp = 2, fp = 1, fn = 1, tn = 1
        let pred = labels(&[1, 1, 1, 2, 2, 0, 0, 0, 0]);
        let truth = labels(&[1, 1, 2, 1, 2, 0, 1, 0, 2]);
        let m = score(&pred, &truth).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (2, 1, 1, 1));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.evaluated_cells, 5);
    }

    #[test]
    fn all_normal_predictor() {
        let truth: Vec<u8> = (0..100).map(|k| if k < 55 { 1 } else { 2 }).collect();
        let pred = vec![1u8; 100];
        let m = score(&labels(&pred), &labels(&truth)).unwrap();
        assert_eq!(m.recall, 1.0);
        assert!((m.precision - 0.55).abs() < 1e-15);
    }

    #[test]
    fn zero_radius_marks_everything_anomalous() {
        let net = TravNet::new(NetworkConfig::default()).unwrap();
        let grid = GridConfig { resolution: 0.5, ..grid3() };
        let cloud = PointCloud::new(vec![Point3::new(0.2, 0.2, 0.1), Point3::new(1.2, 0.7, 0.4)]);
        let sphere = Hypersphere::new(vec![100.0; 8], 0.0, 0.5, 5).unwrap();
        let p = predict_grid(&net, &sphere, &cloud, &grid, 0).unwrap();
        assert_eq!(p.count(CellLabel::Anomalous), 2);
        assert_eq!(p.count(CellLabel::Empty), 7);
    }

    #[test]
    fn predictions_match_distance_check() {
        let net = TravNet::new(NetworkConfig::default()).unwrap();
        let grid = GridConfig { height_cells: 8, width_cells: 8, resolution: 0.25, ..grid3() };
        let cloud = PointCloud::new(
            (0..300).map(|k| Point3::new((k % 17) as f64 * 0.11, (k % 13) as f64 * 0.15, (k % 7) as f64 * 0.1)).collect(),
        );
        let pillars = voxelize_pillars(&cloud, &grid, 0);
        let inf = net.infer(&pillars).unwrap();
        let center = inf.latents.row(0).to_vec();
        let mut ds: Vec<f64> = (0..inf.cells.len())
            .map(|k| inf.latents.row(k).iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        let r = {
            ds.sort_by(f64::total_cmp);
            ds[ds.len() / 2]
        };
        let sphere = Hypersphere::new(center.clone(), r, 0.5, 5).unwrap();
        let pred = predict_pillars(&net, &sphere, &pillars).unwrap();
        for (k, &c) in inf.cells.iter().enumerate() {
            let d = inf.latents.row(k).iter().zip(&center).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let expect = if d <= r { CellLabel::Normal } else { CellLabel::Anomalous };
            assert_eq!(pred.cells[c], expect);
        }
        assert_eq!(pred.cells[inf.cells[0]], CellLabel::Normal);
    }

    proptest! {
        #[test]
        fn confusion_invariants(cells in prop::collection::vec((0u8..3, 0u8..3), 16)) {
            let pred = labels(&cells.iter().map(|c| c.0).collect::<Vec<_>>());
            let truth = labels(&cells.iter().map(|c| c.1).collect::<Vec<_>>());
            let m = score(&pred, &truth).unwrap();
            let excluded = cells.iter().filter(|(p, t)| *p == 0 || *t == 0).count() as u64;
            prop_assert_eq!(m.evaluated_cells + excluded, 16);

            // anomalous-as-positive view swaps tp with tn and fp with fn
            let flip = |g: &LabelGrid| LabelGrid {
                grid: g.grid.clone(),
                cells: g.cells.iter().map(|c| match c {
                    CellLabel::Normal => CellLabel::Anomalous,
                    CellLabel::Anomalous => CellLabel::Normal,
                    CellLabel::Empty => CellLabel::Empty,
                }).collect(),
            };
            let f = score(&flip(&pred), &flip(&truth)).unwrap();
            prop_assert_eq!((f.tp, f.fp, f.fn_, f.tn), (m.tn, m.fn_, m.fp, m.tp));

            // transposing both grids changes nothing
            let tr = |g: &LabelGrid| LabelGrid {
                grid: g.grid.clone(),
                cells: (0..16).map(|k| g.cells[(k % 4) * 4 + k / 4]).collect(),
            };
            let t = score(&tr(&pred), &tr(&truth)).unwrap();
            prop_assert_eq!(t, m);
        }
    }
}

// A seeded synthetic world, a robot trajectory through it and one scan in
// the robot frame with its supervision window.

use gsat::bev::GridConfig;
use gsat::eval::{project_labels, CellLabel};
use gsat::supervision::{build_window, rasterize, ScoreParams};
use gsat::synth::{extract_scan, generate_trajectory, generate_world, local_window, pose_at, RobotProfile, WorldSpec, CLASS_NAMES};

#[derive(Debug, Clone, Default)]
pub struct WorldReport {
    pub points_per_class: Vec<(String, usize)>,
    pub trajectory_len: usize,
    pub scan_points: usize,
    pub normal_cells: usize,
    pub anomalous_cells: usize,
    pub visited_cells: usize,
}

pub fn run_example() -> WorldReport {
    let world = generate_world(&WorldSpec { seed: 3, ..Default::default() }).unwrap();
    let profile = RobotProfile::wheeled();
    let traj = generate_trajectory(&world, &profile, 200, 3).unwrap();
    let mut rep = WorldReport { trajectory_len: traj.len(), ..Default::default() };
    for (c, name) in CLASS_NAMES.iter().enumerate() {
        let n = world.cloud.labels.as_ref().map_or(0, |ls| ls.iter().filter(|l| **l as usize == c).count());
        rep.points_per_class.push((name.to_string(), n));
    }

    let pose = pose_at(&world, &traj, 0);
    let scan = extract_scan(&world, &pose, 8.5);
    let grid = GridConfig::training();
    let labels = project_labels(&scan, &profile.anomalous_classes(), &grid).unwrap();
    let window = build_window(&local_window(&traj, &pose, 0, 50), 0, 50, &ScoreParams::default()).unwrap();
    let sup = rasterize(&window, &grid);
    rep.scan_points = scan.len();
    rep.normal_cells = labels.count(CellLabel::Normal);
    rep.anomalous_cells = labels.count(CellLabel::Anomalous);
    rep.visited_cells = sup.visited_count();
    println!("{rep:#?}");
    rep
}

#[allow(dead_code)]
fn main() {
    run_example();
}

#[allow(dead_code)]
mod supervision_window {
    include!("../examples/supervision_window.rs");
}
#[allow(dead_code)]
mod hypersphere_boundary {
    include!("../examples/hypersphere_boundary.rs");
}
#[allow(dead_code)]
mod voxelize {
    include!("../examples/voxelize.rs");
}
#[allow(dead_code)]
mod augmentation {
    include!("../examples/augmentation.rs");
}
#[allow(dead_code)]
mod costmap {
    include!("../examples/costmap.rs");
}
#[allow(dead_code)]
mod synthetic_world {
    include!("../examples/synthetic_world.rs");
}
#[allow(dead_code)]
mod pipeline {
    include!("../examples/pipeline.rs");
}

#[test]
fn supervision_example() {
    let r = supervision_window::run_example();
    assert_eq!(r.tau_at_threshold, 0.5);
    assert_eq!(r.cell_errors, 0);
}

#[test]
fn hypersphere_example() {
    let r = hypersphere_boundary::run_example();
    assert!(r.radius_max_ulps <= 1);
    assert_eq!(r.endpoint_failures, 0);
    assert_eq!(r.mismatches, 0);
    assert_eq!(r.on_boundary, 200);
}

#[test]
fn voxelize_example() {
    let r = voxelize::run_example();
    assert!(r.offset_excess <= 1e-12);
    assert!(r.max_centroid < 1e-9);
    assert_eq!(r.sigma_mismatches, 0);
    assert!(r.permutation_diff < 1e-9);
}

#[test]
fn augmentation_example() {
    let r = augmentation::run_example();
    assert!(r.distance_err < 1e-9 && r.inverse_err < 1e-9);
    assert!(r.ransac_max_err_deg < 1.0);
    assert_eq!(r.gate_errors, 0);
}

#[test]
fn costmap_example() {
    let r = costmap::run_example();
    assert_eq!(r.monotonicity_violations, 0);
    assert_eq!(r.convention_errors, 0);
    assert!(r.pgm_round_trip && r.csv_round_trip);
}

#[test]
fn synthetic_world_example() {
    let r = synthetic_world::run_example();
    assert_eq!(r.trajectory_len, 200);
    assert!(r.points_per_class.iter().all(|(_, n)| *n > 0));
    assert!(r.normal_cells > 0 && r.anomalous_cells > 0);
    assert!(r.visited_cells > 10);
}

#[test]
fn pipeline_example() {
    let r = pipeline::run_example();
    assert!(r.identical_checkpoints && r.identical_logs);
    assert!((0.0..=1.0).contains(&r.f1));
}

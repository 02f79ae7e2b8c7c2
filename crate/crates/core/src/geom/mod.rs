//! Point clouds, ground-plane estimation and the rigid augmentations used
//! to diversify positive traversal experience.
//!
//! Rotation conventions are right-handed:
//!
//! ```text
//! R_z(psi)   = [[cos, -sin, 0], [sin, cos, 0], [0, 0, 1]]
//! R_y(theta) = [[cos, 0, sin], [0, 1, 0], [-sin, 0, cos]]
//! ```

mod augment;
pub mod io;
mod ransac;

pub use augment::{augment, AugmentPolicy};
pub use ransac::{ransac_ground, slope_angle, Plane, RansacConfig};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn dist(&self, other: &Point3) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2) + (self.z - other.z).powi(2)).sqrt()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }
}

/// Ordered set of points with optional per-point class ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self {
            points,
            labels: None,
        }
    }

    /// Builds a labeled cloud. Panics if the label count differs from the point count.
    pub fn with_labels(points: Vec<Point3>, labels: Vec<u16>) -> Self {
        assert_eq!(points.len(), labels.len(), "labels must align 1:1 with points");
        Self {
            points,
            labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn label(&self, idx: usize) -> Option<u16> {
        self.labels.as_ref().map(|l| l[idx])
    }

    /// Applies `f` to every point, keeping labels.
    pub fn map_points(&self, f: impl Fn(&Point3) -> Point3) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(f).collect(),
            labels: self.labels.clone(),
        }
    }
}

/// Reflection across the yz-plane, `S_x = diag(-1, 1, 1)`.
pub fn flip_x(cloud: &PointCloud) -> PointCloud {
    cloud.map_points(|p| Point3::new(-p.x, p.y, p.z))
}

/// Rotation about the z-axis by `psi` radians.
pub fn rotate_yaw(cloud: &PointCloud, psi: f64) -> PointCloud {
    let (s, c) = psi.sin_cos();
    cloud.map_points(|p| Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z))
}

/// Rotation about the y-axis by `theta` radians.
pub fn rotate_pitch(cloud: &PointCloud, theta: f64) -> PointCloud {
    let (s, c) = theta.sin_cos();
    cloud.map_points(|p| Point3::new(c * p.x + s * p.z, p.y, -s * p.x + c * p.z))
}

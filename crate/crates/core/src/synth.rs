//! Seeded synthetic terrain, obstacle scatter and robot trajectories.
//!
//! The world is a heightfield of Gaussian hills over `[0, extent]^2` with
//! rocks, low bushes, high bushes and trees scattered on it. Every point
//! carries its class id; which classes count as anomalous depends on the
//! robot profile.

use std::f64::consts::PI;

use pathfinding::prelude::{astar, bfs_reach};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev::GridConfig;
use crate::error::{Error, Result};
use crate::eval::{project_labels, LabelGrid};
use crate::geom::{Point3, PointCloud};
use crate::supervision::TrajectorySample;

pub const GROUND: u16 = 0;
pub const ROCK: u16 = 1;
pub const LOW_BUSH: u16 = 2;
pub const HIGH_BUSH: u16 = 3;
pub const TREE: u16 = 4;

pub const CLASS_NAMES: [&str; 5] = ["ground", "rock", "low_bush", "high_bush", "tree"];

/// Height separating low from high vegetation.
pub const BUSH_SPLIT: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObstacleCounts {
    pub rocks: usize,
    pub low_bushes: usize,
    pub high_bushes: usize,
    pub trees: usize,
}

impl Default for ObstacleCounts {
    fn default() -> Self {
        Self { rocks: 150, low_bushes: 150, high_bushes: 150, trees: 75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Side length of the square world in meters.
    pub extent: f64,
    /// Ground points per square meter (obstacle surfaces use the same rate).
    pub density: f64,
    pub ground_noise: f64,
    pub hills: usize,
    /// Hill radius range in meters.
    pub hill_radius: (f64, f64),
    /// Steepest slope of any single hill, in degrees.
    pub max_slope_deg: f64,
    pub obstacles: ObstacleCounts,
    /// Obstacle-free margin around the world border.
    pub margin: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            extent: 60.0,
            density: 100.0,
            ground_noise: 0.01,
            hills: 20,
            hill_radius: (1.0, 2.5),
            max_slope_deg: 15.0,
            obstacles: ObstacleCounts::default(),
            margin: 2.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 2.0 * self.margin) || !self.extent.is_finite() {
            return Err(Error::Spec("world.extent must exceed twice the margin".into()));
        }
        if !(self.density > 0.0) {
            return Err(Error::Spec("world.density must be positive".into()));
        }
        if !(self.ground_noise >= 0.0) {
            return Err(Error::Spec("world.ground_noise must be non-negative".into()));
        }
        if !(self.max_slope_deg >= 0.0 && self.max_slope_deg <= 25.0) {
            return Err(Error::Spec("world.max_slope_deg must lie in [0, 25]".into()));
        }
        let (a, b) = self.hill_radius;
        if !(a > 0.0 && b >= a) {
            return Err(Error::Spec("world.hill_radius must be an increasing positive range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hill {
    pub center: [f64; 2],
    pub sigma: f64,
    pub amplitude: f64,
}

/// Ground surface as a sum of Gaussian bumps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Terrain {
    pub hills: Vec<Hill>,
}

impl Terrain {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.hills
            .iter()
            .map(|h| {
                let (dx, dy) = (x - h.center[0], y - h.center[1]);
                h.amplitude * (-(dx * dx + dy * dy) / (2.0 * h.sigma * h.sigma)).exp()
            })
            .sum()
    }

    /// Slope angle in radians from the analytic gradient.
    pub fn slope(&self, x: f64, y: f64) -> f64 {
        let (mut gx, mut gy) = (0.0, 0.0);
        for h in &self.hills {
            let (dx, dy) = (x - h.center[0], y - h.center[1]);
            let e = h.amplitude * (-(dx * dx + dy * dy) / (2.0 * h.sigma * h.sigma)).exp();
            gx -= e * dx / (h.sigma * h.sigma);
            gy -= e * dy / (h.sigma * h.sigma);
        }
        (gx * gx + gy * gy).sqrt().atan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub class: u16,
    pub center: [f64; 2],
    /// Footprint radius.
    pub radius: f64,
    /// Height above the local ground.
    pub height: f64,
}

impl Obstacle {
    /// Planar radius covered by any of its points (tree crowns overhang the
    /// trunk).
    pub fn footprint(&self) -> f64 {
        if self.class == TREE {
            self.radius.max(self.height * CROWN_RATIO)
        } else {
            self.radius
        }
    }
}

const CROWN_RATIO: f64 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub terrain: Terrain,
    pub obstacles: Vec<Obstacle>,
    pub cloud: PointCloud,
}

fn disc_point(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let a = rng.gen_range(0.0..2.0 * PI);
    let d = r * rng.gen::<f64>().sqrt();
    (d * a.cos(), d * a.sin())
}

fn surface_count(rng: &mut ChaCha8Rng, area: f64, density: f64) -> usize {
    let mean = area * density;
    mean.floor() as usize + usize::from(rng.gen::<f64>() < mean.fract())
}

/// Builds the terrain, places obstacles and samples the labeled cloud.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = spec.extent;
    let tan_max = spec.max_slope_deg.to_radians().tan();
    let mut hills = Vec::with_capacity(spec.hills);
    for _ in 0..spec.hills {
        let sigma = rng.gen_range(spec.hill_radius.0..=spec.hill_radius.1);
        // steepest slope of a Gaussian bump is A / sigma * exp(-1/2)
        let slope = rng.gen_range(0.4..=1.0) * tan_max;
        let sign = if rng.gen_bool(0.7) { 1.0 } else { -1.0 };
        hills.push(Hill {
            center: [rng.gen_range(0.0..e), rng.gen_range(0.0..e)],
            sigma,
            amplitude: sign * slope * sigma * 0.5f64.exp(),
        });
    }
    let terrain = Terrain { hills };

    let mut obstacles = Vec::new();
    let counts = spec.obstacles;
    let kinds = [
        (ROCK, counts.rocks, (0.3, 0.8), (0.3, 1.0)),
        (LOW_BUSH, counts.low_bushes, (0.4, 1.0), (0.2, 0.55)),
        (HIGH_BUSH, counts.high_bushes, (0.4, 1.0), (BUSH_SPLIT, 1.6)),
        (TREE, counts.trees, (0.15, 0.3), (3.0, 6.0)),
    ];
    for (class, n, rad, hgt) in kinds {
        for _ in 0..n {
            let radius = rng.gen_range(rad.0..=rad.1);
            let height = rng.gen_range(hgt.0..=hgt.1);
            let mut ob = Obstacle { class, center: [0.0; 2], radius, height };
            let lo = spec.margin + ob.footprint();
            ob.center = [rng.gen_range(lo..e - lo), rng.gen_range(lo..e - lo)];
            obstacles.push(ob);
        }
    }

    let noise = Normal::new(0.0, spec.ground_noise.max(1e-12)).expect("valid sigma");
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let n_ground = surface_count(&mut rng, e * e, spec.density);
    for _ in 0..n_ground {
        let (x, y) = (rng.gen_range(0.0..e), rng.gen_range(0.0..e));
        let z = terrain.height(x, y) + if spec.ground_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        points.push(Point3::new(x, y, z));
        labels.push(GROUND);
    }
    for ob in &obstacles {
        let g = terrain.height(ob.center[0], ob.center[1]);
        let [cx, cy] = ob.center;
        match ob.class {
            ROCK => {
                // upper half of an ellipsoid
                let area = 2.0 * PI * ob.radius * ob.radius.max(ob.height);
                for _ in 0..surface_count(&mut rng, area, spec.density) {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    let a = rng.gen_range(0.0..2.0 * PI);
                    let rr = ob.radius * (1.0 - u * u).sqrt();
                    points.push(Point3::new(cx + rr * a.cos(), cy + rr * a.sin(), g + ob.height * u));
                    labels.push(ROCK);
                }
            }
            LOW_BUSH | HIGH_BUSH => {
                // irregular volume of foliage points
                let vol = PI * ob.radius * ob.radius * ob.height;
                for _ in 0..surface_count(&mut rng, vol, spec.density * 2.0) {
                    let (dx, dy) = disc_point(&mut rng, ob.radius);
                    let taper = 1.0 - (dx * dx + dy * dy).sqrt() / ob.radius * 0.5;
                    let z = ob.height * taper * rng.gen::<f64>().powf(0.6);
                    points.push(Point3::new(cx + dx, cy + dy, g + z.min(ob.height * 0.999)));
                    labels.push(ob.class);
                }
            }
            _ => {
                let trunk = 2.0 * PI * ob.radius * ob.height;
                for _ in 0..surface_count(&mut rng, trunk, spec.density) {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    let z = rng.gen_range(0.0..ob.height);
                    points.push(Point3::new(cx + ob.radius * a.cos(), cy + ob.radius * a.sin(), g + z));
                    labels.push(TREE);
                }
                let crown_r = ob.height * CROWN_RATIO;
                let crown = 4.0 * PI * crown_r * crown_r * 0.3;
                for _ in 0..surface_count(&mut rng, crown, spec.density) {
                    let (dx, dy) = disc_point(&mut rng, crown_r);
                    let z = ob.height * rng.gen_range(0.6..1.0);
                    points.push(Point3::new(cx + dx, cy + dy, g + z));
                    labels.push(TREE);
                }
            }
        }
    }
    Ok(World { spec: spec.clone(), terrain, obstacles, cloud: PointCloud::with_labels(points, labels) })
}

/// Oracle labels of `cloud` for a profile: classes the profile cannot
/// traverse are anomalous.
pub fn oracle_labels(cloud: &PointCloud, profile: &RobotProfile, grid: &GridConfig) -> Result<LabelGrid> {
    project_labels(cloud, &profile.anomalous_classes(), grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotProfile {
    pub name: String,
    pub traversable: Vec<u16>,
    pub speed: f64,
    /// Velocity tracking noise sigma per class id; classes not listed use
    /// the ground value.
    pub noise: Vec<(u16, f64)>,
    /// Extra noise sigma per unit of slope (tan of the angle).
    pub slope_noise: f64,
    /// Minimum distance kept to non-traversable obstacle footprints.
    pub clearance: f64,
    /// Slope above which terrain is avoided, in degrees.
    pub max_slope_deg: f64,
    /// Sampling period of the trajectory in seconds.
    pub dt: f64,
}

impl Default for RobotProfile {
    fn default() -> Self {
        RobotProfile::wheeled()
    }
}

impl RobotProfile {
    /// Ground-only platform.
    pub fn wheeled() -> Self {
        Self {
            name: "wheeled".into(),
            traversable: vec![GROUND],
            speed: 1.0,
            noise: vec![(GROUND, 0.05)],
            slope_noise: 1.2,
            clearance: 0.3,
            max_slope_deg: 22.0,
            dt: 0.1,
        }
    }

    /// Legged platform that also walks through low vegetation.
    pub fn legged() -> Self {
        Self {
            name: "legged".into(),
            traversable: vec![GROUND, LOW_BUSH],
            speed: 0.8,
            noise: vec![(GROUND, 0.05), (LOW_BUSH, 0.35)],
            slope_noise: 0.8,
            clearance: 0.25,
            max_slope_deg: 25.0,
            dt: 0.1,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "wheeled" => Ok(Self::wheeled()),
            "legged" => Ok(Self::legged()),
            other => Err(Error::Config(format!("unknown robot profile `{other}`"))),
        }
    }

    pub fn anomalous_classes(&self) -> Vec<u16> {
        (0..CLASS_NAMES.len() as u16).filter(|c| !self.traversable.contains(c)).collect()
    }

    fn noise_for(&self, class: u16) -> f64 {
        let ground = self.noise.iter().find(|(c, _)| *c == GROUND).map_or(0.0, |n| n.1);
        self.noise.iter().find(|(c, _)| *c == class).map_or(ground, |n| n.1)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.traversable.contains(&GROUND) {
            return Err(Error::Spec("profile must be able to traverse ground".into()));
        }
        if !(self.speed > 0.0 && self.dt > 0.0) {
            return Err(Error::Spec("profile speed and dt must be positive".into()));
        }
        if self.noise.iter().any(|(_, s)| !(*s >= 0.0)) || !(self.slope_noise >= 0.0) || !(self.clearance >= 0.0) {
            return Err(Error::Spec("profile noise and clearance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Coarse occupancy used for planning.
struct PlanGrid {
    res: f64,
    n: usize,
    blocked: Vec<bool>,
    /// Traversable class the cell lies in (for tracking noise).
    class: Vec<u16>,
}

impl PlanGrid {
    fn new(world: &World, profile: &RobotProfile, res: f64) -> Self {
        let n = (world.spec.extent / res).floor() as usize;
        let mut blocked = vec![false; n * n];
        let mut class = vec![GROUND; n * n];
        let max_slope = profile.max_slope_deg.to_radians();
        let margin = (world.spec.margin / res).ceil() as usize;
        for i in 0..n {
            for j in 0..n {
                let (x, y) = ((j as f64 + 0.5) * res, (i as f64 + 0.5) * res);
                let edge = i < margin || j < margin || i + margin >= n || j + margin >= n;
                blocked[i * n + j] = edge || world.terrain.slope(x, y) > max_slope;
            }
        }
        for ob in &world.obstacles {
            let passable = profile.traversable.contains(&ob.class);
            let reach = if passable { ob.radius } else { ob.footprint() + profile.clearance + res * 0.71 };
            let lo_i = ((ob.center[1] - reach) / res).floor().max(0.0) as usize;
            let hi_i = (((ob.center[1] + reach) / res).ceil() as usize).min(n);
            let lo_j = ((ob.center[0] - reach) / res).floor().max(0.0) as usize;
            let hi_j = (((ob.center[0] + reach) / res).ceil() as usize).min(n);
            for i in lo_i..hi_i {
                for j in lo_j..hi_j {
                    let (x, y) = ((j as f64 + 0.5) * res, (i as f64 + 0.5) * res);
                    if (x - ob.center[0]).hypot(y - ob.center[1]) <= reach {
                        if passable {
                            if class[i * n + j] == GROUND {
                                class[i * n + j] = ob.class;
                            }
                        } else {
                            blocked[i * n + j] = true;
                        }
                    }
                }
            }
        }
        PlanGrid { res, n, blocked, class }
    }

    fn cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (i, j) = ((y / self.res).floor(), (x / self.res).floor());
        if i < 0.0 || j < 0.0 || i >= self.n as f64 || j >= self.n as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    fn free(&self, c: (usize, usize)) -> bool {
        !self.blocked[c.0 * self.n + c.1]
    }

    fn center(&self, c: (usize, usize)) -> [f64; 2] {
        [(c.1 as f64 + 0.5) * self.res, (c.0 as f64 + 0.5) * self.res]
    }

    /// 8-connected moves between free cells, without cutting corners past
    /// blocked cells; costs are scaled by 1000.
    fn neighbours(&self, (i, j): (usize, usize)) -> Vec<((usize, usize), u64)> {
        let n = self.n as isize;
        let mut next = Vec::with_capacity(8);
        for (di, dj) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
            let (ni, nj) = (i as isize + di, j as isize + dj);
            if ni < 0 || nj < 0 || ni >= n || nj >= n {
                continue;
            }
            let c = (ni as usize, nj as usize);
            if !self.free(c) || !self.free((i, c.1)) || !self.free((c.0, j)) {
                continue;
            }
            next.push((c, if di != 0 && dj != 0 { 1414 } else { 1000 }));
        }
        next
    }

    /// Cells of the largest connected free region.
    fn largest_region(&self) -> Vec<(usize, usize)> {
        let mut seen = vec![false; self.n * self.n];
        let mut best = Vec::new();
        for k in 0..self.n * self.n {
            let c = (k / self.n, k % self.n);
            if seen[k] || !self.free(c) {
                continue;
            }
            let region: Vec<(usize, usize)> = bfs_reach(c, |&p| self.neighbours(p).into_iter().map(|x| x.0)).collect();
            for r in &region {
                seen[r.0 * self.n + r.1] = true;
            }
            if region.len() > best.len() {
                best = region;
            }
        }
        best.sort_unstable();
        best
    }

    fn plan(&self, from: (usize, usize), to: (usize, usize)) -> Option<Vec<(usize, usize)>> {
        let h = |c: &(usize, usize)| {
            let (di, dj) = (c.0 as f64 - to.0 as f64, c.1 as f64 - to.1 as f64);
            ((di * di + dj * dj).sqrt() * 1000.0) as u64
        };
        astar(&from, |&c| self.neighbours(c), h, |c| *c == to).map(|(p, _)| p)
    }
}

/// Plans a path of `length` samples through random waypoints and attaches
/// commanded and noisy actual velocities.
pub fn generate_trajectory(world: &World, profile: &RobotProfile, length: usize, seed: u64) -> Result<Vec<TrajectorySample>> {
    profile.validate()?;
    if length < 2 {
        return Err(Error::Spec("trajectory length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = PlanGrid::new(world, profile, 0.25);
    let free = grid.largest_region();
    if free.is_empty() {
        return Err(Error::NoPath("no traversable cell in the world".into()));
    }
    let step = profile.speed * profile.dt;
    let mut needed = step * (length as f64 - 1.0);
    let e = world.spec.extent;

    let mut current = free[rng.gen_range(0..free.len())];
    let mut poly: Vec<[f64; 2]> = vec![grid.center(current)];
    let mut total = 0.0;
    let mut attempts = 0;
    let pos = loop {
        if total >= needed {
            // smoothing shortens the route, so walk it and extend if needed
            let pos = walk(&smooth(&poly, &grid), step, length);
            if pos.len() >= length {
                break pos;
            }
            needed = total + step * (length - pos.len()) as f64 + 1.0;
        }
        attempts += 1;
        if attempts > 500 {
            return Err(Error::NoPath(format!("could not extend the path beyond {total:.1} m")));
        }
        // favour long legs so the robot crosses varied terrain
        let target = free[rng.gen_range(0..free.len())];
        let d = grid.center(target);
        let c = grid.center(current);
        if (d[0] - c[0]).hypot(d[1] - c[1]) < e * 0.25 {
            continue;
        }
        if let Some(cells) = grid.plan(current, target) {
            for cell in cells.into_iter().skip(1) {
                let p = grid.center(cell);
                let q = *poly.last().unwrap();
                total += (p[0] - q[0]).hypot(p[1] - q[1]);
                poly.push(p);
            }
            current = target;
        }
    };

    let mut out = Vec::with_capacity(length);
    for k in 0..length {
        let (a, b) = if k + 1 < length { (pos[k], pos[k + 1]) } else { (pos[k - 1], pos[k]) };
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let n = dx.hypot(dy).max(1e-12);
        let v_cmd = [profile.speed * dx / n, profile.speed * dy / n];
        let class = grid.cell(pos[k][0], pos[k][1]).map_or(GROUND, |(i, j)| grid.class[i * grid.n + j]);
        let sigma = profile.noise_for(class) + profile.slope_noise * world.terrain.slope(pos[k][0], pos[k][1]).tan();
        let noise = Normal::new(0.0, sigma.max(1e-12)).expect("valid sigma");
        let v_actual = if sigma > 0.0 {
            [v_cmd[0] + noise.sample(&mut rng), v_cmd[1] + noise.sample(&mut rng)]
        } else {
            v_cmd
        };
        out.push(TrajectorySample { time: k as f64 * profile.dt, position: pos[k], v_actual, v_cmd });
    }
    Ok(out)
}

/// Drops intermediate vertices when the straight shortcut stays on free
/// cells, removing the grid staircase.
fn smooth(poly: &[[f64; 2]], grid: &PlanGrid) -> Vec<[f64; 2]> {
    let clear = |a: [f64; 2], b: [f64; 2]| {
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let n = (len / (grid.res * 0.25)).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let f = k as f64 / n as f64;
            grid.cell(a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])).map_or(false, |c| grid.free(c))
        })
    };
    let mut out = vec![poly[0]];
    let mut anchor = 0;
    let mut k = 1;
    while k < poly.len() {
        // extend the shortcut as far as it stays clear, capped so turns stay gentle
        if k + 1 < poly.len() && k - anchor < 12 && clear(poly[anchor], poly[k + 1]) {
            k += 1;
            continue;
        }
        out.push(poly[k]);
        anchor = k;
        k += 1;
    }
    out
}

/// Points at arc-length spacing `step` along the polyline.
fn walk(poly: &[[f64; 2]], step: f64, count: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(count);
    out.push(poly[0]);
    let mut carried = 0.0;
    for w in poly.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let mut s = step - carried;
        while s <= len && out.len() < count {
            let f = s / len;
            out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            s += step;
        }
        carried = len - (s - step);
        if out.len() >= count {
            break;
        }
    }
    out
}

/// Local, gravity-aligned frame of a robot pose: origin at the robot on the
/// ground surface, x along the heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: [f64; 2],
    pub ground: f64,
    pub heading: f64,
}

impl Pose {
    pub fn to_local(&self, x: f64, y: f64) -> [f64; 2] {
        let (dx, dy) = (x - self.position[0], y - self.position[1]);
        let (s, c) = self.heading.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn rotate_vec(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.heading.sin_cos();
        [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
    }
}

/// Pose of trajectory sample `t`, heading along the commanded velocity.
pub fn pose_at(world: &World, traj: &[TrajectorySample], t: usize) -> Pose {
    let s = &traj[t];
    Pose {
        position: s.position,
        ground: world.terrain.height(s.position[0], s.position[1]),
        heading: s.v_cmd[1].atan2(s.v_cmd[0]),
    }
}

/// World points within `radius` (planar) of the pose, in its local frame.
pub fn extract_scan(world: &World, pose: &Pose, radius: f64) -> PointCloud {
    let labels = world.cloud.labels.as_ref();
    let mut pts = Vec::new();
    let mut lab = Vec::new();
    for (k, p) in world.cloud.points.iter().enumerate() {
        let [lx, ly] = pose.to_local(p.x, p.y);
        if lx.abs() <= radius && ly.abs() <= radius {
            pts.push(Point3::new(lx, ly, p.z - pose.ground));
            lab.push(labels.map_or(GROUND, |l| l[k]));
        }
    }
    PointCloud::with_labels(pts, lab)
}

/// Trajectory samples `t..=t + n` expressed in the frame of `pose`.
pub fn local_window(traj: &[TrajectorySample], pose: &Pose, t: usize, n: usize) -> Vec<TrajectorySample> {
    traj[t..=(t + n).min(traj.len() - 1)]
        .iter()
        .map(|s| TrajectorySample {
            time: s.time - traj[t].time,
            position: pose.to_local(s.position[0], s.position[1]),
            v_actual: pose.rotate_vec(s.v_actual),
            v_cmd: pose.rotate_vec(s.v_cmd),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::CellLabel;

    fn small_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            extent: 30.0,
            density: 10.0,
            hills: 4,
            obstacles: ObstacleCounts { rocks: 10, low_bushes: 10, high_bushes: 10, trees: 5 },
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn world_is_deterministic_and_labeled() {
        let a = generate_world(&small_spec(3)).unwrap();
        let b = generate_world(&small_spec(3)).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.cloud.labels.as_ref().unwrap().len(), a.cloud.len());
        let c = generate_world(&small_spec(4)).unwrap();
        assert_ne!(a.cloud, c.cloud);
    }

    #[test]
    fn obstacle_free_world_is_all_normal() {
        let spec = WorldSpec { obstacles: ObstacleCounts { rocks: 0, low_bushes: 0, high_bushes: 0, trees: 0 }, ..small_spec(1) };
        let w = generate_world(&spec).unwrap();
        let grid = GridConfig { height_cells: 30, width_cells: 30, resolution: 1.0, origin: (0.0, 0.0), max_points: 32, z_crop: None };
        let l = oracle_labels(&w.cloud, &RobotProfile::wheeled(), &grid).unwrap();
        assert_eq!(l.count(CellLabel::Anomalous), 0);
        assert!(l.count(CellLabel::Normal) > 800);
    }

    #[test]
    fn class_heights_respect_the_split() {
        let w = generate_world(&small_spec(5)).unwrap();
        for ob in &w.obstacles {
            match ob.class {
                LOW_BUSH => assert!(ob.height < BUSH_SPLIT),
                HIGH_BUSH | TREE => assert!(ob.height >= BUSH_SPLIT),
                _ => {}
            }
        }
    }

    #[test]
    fn footprints_are_anomalous_in_the_oracle() {
        let w = generate_world(&small_spec(6)).unwrap();
        let grid = GridConfig { height_cells: 60, width_cells: 60, resolution: 0.5, origin: (0.0, 0.0), max_points: 32, z_crop: None };
        let l = oracle_labels(&w.cloud, &RobotProfile::wheeled(), &grid).unwrap();
        for ob in w.obstacles.iter().filter(|o| o.class != GROUND) {
            let (i, j) = grid.cell_of_xy(ob.center[0], ob.center[1]).unwrap();
            if ob.class != TREE {
                assert_eq!(l.get(i, j), CellLabel::Anomalous, "{ob:?}");
            }
        }
        let legged = oracle_labels(&w.cloud, &RobotProfile::legged(), &grid).unwrap();
        assert!(legged.count(CellLabel::Anomalous) < l.count(CellLabel::Anomalous));
        assert_eq!(legged.count(CellLabel::Empty), l.count(CellLabel::Empty));
    }

    #[test]
    fn trajectory_stays_on_traversable_cells() {
        let w = generate_world(&small_spec(7)).unwrap();
        let profile = RobotProfile::wheeled();
        let traj = generate_trajectory(&w, &profile, 400, 1).unwrap();
        assert_eq!(traj.len(), 400);
        assert_eq!(traj, generate_trajectory(&w, &profile, 400, 1).unwrap());
        let grid = GridConfig { height_cells: 200, width_cells: 200, resolution: 0.15, origin: (0.0, 0.0), max_points: 32, z_crop: None };
        let oracle = oracle_labels(&w.cloud, &profile, &grid).unwrap();
        for s in &traj {
            let (i, j) = grid.cell_of_xy(s.position[0], s.position[1]).unwrap();
            assert_ne!(oracle.get(i, j), CellLabel::Anomalous, "{:?}", s.position);
        }
        // arc-length spacing; chords only shorten at polyline corners
        let steps: Vec<f64> = traj
            .windows(2)
            .map(|p| (p[1].position[0] - p[0].position[0]).hypot(p[1].position[1] - p[0].position[1]))
            .collect();
        assert!(steps.iter().all(|d| *d <= 0.1 + 1e-9 && *d > 0.0));
        let exact = steps.iter().filter(|d| (*d - 0.1).abs() < 1e-9).count();
        assert!(exact * 10 >= steps.len() * 9);
    }

    #[test]
    fn noiseless_profile_tracks_exactly() {
        let w = generate_world(&small_spec(8)).unwrap();
        let profile = RobotProfile { noise: vec![(GROUND, 0.0)], slope_noise: 0.0, ..RobotProfile::wheeled() };
        let traj = generate_trajectory(&w, &profile, 100, 2).unwrap();
        assert!(traj.iter().all(|s| s.v_actual == s.v_cmd));
    }

    #[test]
    fn local_frame_puts_robot_at_origin() {
        let w = generate_world(&small_spec(9)).unwrap();
        let traj = generate_trajectory(&w, &RobotProfile::wheeled(), 200, 3).unwrap();
        let pose = pose_at(&w, &traj, 50);
        let win = local_window(&traj, &pose, 50, 50);
        assert_eq!(win.len(), 51);
        assert!(win[0].position[0].abs() < 1e-12 && win[0].position[1].abs() < 1e-12);
        // heading-aligned: the commanded velocity points along +x
        assert!((win[0].v_cmd[0] - 1.0).abs() < 1e-9 && win[0].v_cmd[1].abs() < 1e-9);
        let scan = extract_scan(&w, &pose, 6.0);
        assert!(scan.points.iter().all(|p| p.x.abs() <= 6.0 && p.y.abs() <= 6.0));
    }
}

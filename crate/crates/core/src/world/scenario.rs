use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{signed_distance, stream_rng, Obstacle};
use crate::error::{Error, Result};
use crate::kinematics::{compute_spheres, ArmModel, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ReachingEasy,
    ReachingHard,
    Following,
    BinLoading,
    /// Fixed per-arm goal lists, each goal held until reached.
    Waypoints,
}

impl TaskKind {
    pub const FAMILIES: [TaskKind; 4] = [
        TaskKind::ReachingEasy,
        TaskKind::ReachingHard,
        TaskKind::Following,
        TaskKind::BinLoading,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::ReachingEasy => "reaching-easy",
            TaskKind::ReachingHard => "reaching-hard",
            TaskKind::Following => "following",
            TaskKind::BinLoading => "bin-loading",
            TaskKind::Waypoints => "waypoints",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('_', "-").to_ascii_lowercase();
        [TaskKind::ReachingEasy, TaskKind::ReachingHard, TaskKind::Following, TaskKind::BinLoading, TaskKind::Waypoints]
            .into_iter()
            .find(|t| t.name() == norm)
            .ok_or_else(|| Error::InvalidScenario(format!("unknown task `{s}`")))
    }
}

/// One arm and its starting configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSetup {
    pub model: ArmModel,
    pub q0: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalRegion {
    /// Within 120 degrees either side of the direction the arm faces.
    AroundArm,
    /// Around the point halfway between the arm base and the center.
    Midpoint,
    /// Around the shared center, so every arm competes for the same space.
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinParams {
    pub center: [f64; 2],
    /// Side of each of the four square cells (m).
    pub cell_size: f64,
    /// Height of the bin floor (m); the bin sits below the arm mounts.
    pub floor_z: f64,
    /// Drop point height above a cell center (m).
    pub drop_height: f64,
    pub wall_height: f64,
    /// Horizontal distance of the picking spot behind each base (m).
    pub pick_offset: f64,
    pub pick_height: f64,
}

impl Default for BinParams {
    fn default() -> Self {
        BinParams {
            center: [0.0, 0.0],
            cell_size: 0.3,
            floor_z: -0.2,
            drop_height: 0.35,
            wall_height: 0.1,
            pick_offset: 0.5,
            pick_height: 0.1,
        }
    }
}

impl BinParams {
    /// Cell floor centers, ordered (-,-), (+,-), (-,+), (+,+).
    pub fn cells(&self) -> [Vector3<f64>; 4] {
        let h = self.cell_size / 2.0;
        let [cx, cy] = self.center;
        [(-h, -h), (h, -h), (-h, h), (h, h)].map(|(dx, dy)| Vector3::new(cx + dx, cy + dy, self.floor_z))
    }

    pub fn drop_point(&self, cell: usize) -> Vector3<f64> {
        self.cells()[cell] + Vector3::new(0.0, 0.0, self.drop_height)
    }

    /// Outer walls and the two dividers as thin static boxes.
    pub fn walls(&self) -> Vec<Obstacle> {
        let (t, s) = (0.005, self.cell_size);
        let z = self.floor_z + self.wall_height / 2.0;
        let hz = self.wall_height / 2.0;
        let [cx, cy] = self.center;
        let c = |x: f64, y: f64| Vector3::new(cx + x, cy + y, z);
        vec![
            Obstacle::cuboid(c(-s, 0.0), [t, s, hz]),
            Obstacle::cuboid(c(s, 0.0), [t, s, hz]),
            Obstacle::cuboid(c(0.0, -s), [s, t, hz]),
            Obstacle::cuboid(c(0.0, s), [s, t, hz]),
            Obstacle::cuboid(c(0.0, 0.0), [t, s, hz]),
            Obstacle::cuboid(c(0.0, 0.0), [s, t, hz]),
        ]
    }
}

fn default_tolerance() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    #[serde(default = "default_tolerance")]
    pub goal_tolerance: f64,
    /// Seconds before an unreached reaching goal is replaced.
    pub goal_timeout: f64,
    /// Sampled goals stay within this fraction of the arm's reach.
    pub reach_fraction: f64,
    /// Half side of the square workspace (m).
    pub workspace_half: f64,
    pub obstacle_speed: f64,
    pub follow_speed: f64,
    pub respawn_obstacles: bool,
    /// Overrides the task's default goal region.
    pub goal_region: Option<GoalRegion>,
    pub region_radius: f64,
    pub bin: BinParams,
    /// Per-arm goal lists for the waypoint task.
    pub waypoints: Vec<Vec<[f64; 3]>>,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            goal_tolerance: 0.05,
            goal_timeout: 1.0,
            reach_fraction: 0.95,
            workspace_half: 1.0,
            obstacle_speed: 0.25,
            follow_speed: 0.1,
            respawn_obstacles: true,
            goal_region: None,
            region_radius: 0.15,
            bin: BinParams::default(),
            waypoints: vec![],
        }
    }
}

fn default_dt() -> f64 {
    1.0 / 60.0
}

fn default_t_max() -> usize {
    500
}

/// A complete, self-describing trial environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub task: TaskKind,
    pub level: u8,
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(rename = "T_max", default = "default_t_max")]
    pub t_max: usize,
    pub arms: Vec<ArmSetup>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub task_params: TaskParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if !(1..=5).contains(&self.level) {
            return bad(format!("level {} outside 1..=5", self.level));
        }
        if !(self.dt > 0.0) || self.t_max == 0 {
            return bad("dt must be > 0 and T_max >= 1".into());
        }
        if self.arms.is_empty() {
            return bad("no arms".into());
        }
        for (i, arm) in self.arms.iter().enumerate() {
            arm.model.validate()?;
            if arm.q0.len() != arm.model.dof() {
                return bad(format!("arm {i}: q0 has {} entries, model has {} joints", arm.q0.len(), arm.model.dof()));
            }
            let lim = &arm.model.limits;
            if arm.q0.iter().enumerate().any(|(j, q)| *q < lim.q_min[j] || *q > lim.q_max[j]) {
                return bad(format!("arm {i}: q0 outside joint limits"));
            }
            for (k, other) in self.arms.iter().enumerate().skip(i + 1) {
                if (arm.model.base.position - other.model.base.position).norm() < 1e-6 {
                    return bad(format!("arms {i} and {k} share a base position"));
                }
            }
        }
        if self.obstacles.iter().any(|o| !o.is_valid()) {
            return bad("obstacle with non-positive dimensions".into());
        }
        let p = &self.task_params;
        if !(p.goal_tolerance > 0.0) {
            return bad("goal_tolerance must be > 0".into());
        }
        if self.task == TaskKind::Waypoints
            && (p.waypoints.len() != self.arms.len() || p.waypoints.iter().any(Vec::is_empty))
        {
            return bad("waypoint task needs a non-empty goal list per arm".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn goal_region(&self) -> GoalRegion {
        self.task_params.goal_region.unwrap_or(match self.task {
            TaskKind::ReachingHard => GoalRegion::Midpoint,
            _ => GoalRegion::AroundArm,
        })
    }

    /// Horizontal centroid of the arm bases.
    pub fn center(&self) -> Vector3<f64> {
        let mut c = self.arms.iter().map(|a| a.model.base.position).sum::<Vector3<f64>>() / self.arms.len() as f64;
        c.z = 0.0;
        c
    }

    pub fn static_obstacles(&self) -> impl Iterator<Item = &Obstacle> {
        self.obstacles.iter().filter(|o| !o.dynamic)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmPreset {
    Desk6,
    Spatial3,
}

impl ArmPreset {
    pub fn model(&self) -> ArmModel {
        match self {
            ArmPreset::Desk6 => ArmModel::desk6(),
            ArmPreset::Spatial3 => ArmModel::spatial3(),
        }
    }

    pub fn home(&self) -> Vec<f64> {
        match self {
            ArmPreset::Desk6 => vec![0.0, 1.4, -2.2, -0.6, 0.0, 0.0],
            ArmPreset::Spatial3 => vec![0.0, 1.4, -2.2],
        }
    }
}

impl FromStr for ArmPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk6" => Ok(ArmPreset::Desk6),
            "spatial3" => Ok(ArmPreset::Spatial3),
            _ => Err(Error::InvalidScenario(format!("unknown arm preset `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArmLayout {
    /// Up to four arms on the corners of a unit square, facing its center.
    Corners { count: usize },
    /// Two arms on the x axis, `separation` apart, facing each other.
    HeadOn { separation: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOptions {
    pub preset: ArmPreset,
    pub layout: ArmLayout,
    /// Overrides the level-derived obstacle count.
    pub obstacle_count: Option<usize>,
    pub params: TaskParams,
    pub t_max: usize,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        ScenarioOptions {
            preset: ArmPreset::Desk6,
            layout: ArmLayout::Corners { count: 4 },
            obstacle_count: None,
            params: TaskParams::default(),
            t_max: 500,
        }
    }
}

fn base_poses(layout: ArmLayout) -> Vec<Pose> {
    let facing = |p: Vector3<f64>| Pose::from_position_yaw(p, (-p.y).atan2(-p.x));
    match layout {
        ArmLayout::Corners { count } => [(0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)]
            .iter()
            .take(count.clamp(1, 4))
            .map(|&(x, y)| facing(Vector3::new(x, y, 0.0)))
            .collect(),
        ArmLayout::HeadOn { separation } => {
            let h = separation / 2.0;
            vec![facing(Vector3::new(-h, 0.0, 0.0)), facing(Vector3::new(h, 0.0, 0.0))]
        }
    }
}

/// A dynamic obstacle entering from a random workspace edge, headed for a
/// random point near the center.
pub(crate) fn spawn_dynamic(rng: &mut ChaCha8Rng, half: f64, speed: f64) -> (Vector3<f64>, Vector3<f64>) {
    let along = rng.random_range(-half..half);
    let z = rng.random_range(0.15..0.5);
    let pos = match rng.random_range(0..4) {
        0 => Vector3::new(-half, along, z),
        1 => Vector3::new(half, along, z),
        2 => Vector3::new(along, -half, z),
        _ => Vector3::new(along, half, z),
    };
    let target = Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(0.15..0.5));
    let dir = (target - pos).normalize();
    (pos, dir * speed)
}

fn place_static(rng: &mut ChaCha8Rng, arms: &[ArmSetup]) -> Obstacle {
    let arm_spheres: Vec<_> = arms.iter().map(|a| compute_spheres(&a.model, &a.q0).expect("valid q0")).collect();
    loop {
        let h = [rng.random_range(0.04..0.1), rng.random_range(0.04..0.1), rng.random_range(0.04..0.1)];
        let c = Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(0.1..0.4));
        let o = Obstacle::cuboid(c, h);
        let near_base = arms.iter().any(|a| (a.model.base.position.xy() - c.xy()).norm() < 0.3);
        let near_arm = arm_spheres
            .iter()
            .any(|s| s.centers.iter().zip(&s.radii).any(|(p, r)| signed_distance(p, *r, &o) < 0.1));
        if !near_base && !near_arm {
            return o;
        }
    }
}

/// Deterministic scenario with the default desk setup: four six-joint arms
/// on the corners of a unit square.
pub fn make_scenario(task: TaskKind, level: u8, seed: u64) -> Result<Scenario> {
    make_scenario_with(task, level, seed, &ScenarioOptions::default())
}

pub fn make_scenario_with(task: TaskKind, level: u8, seed: u64, opts: &ScenarioOptions) -> Result<Scenario> {
    if !(1..=5).contains(&level) {
        return Err(Error::InvalidScenario(format!("level {level} outside 1..=5")));
    }
    let arms: Vec<ArmSetup> = base_poses(opts.layout)
        .into_iter()
        .map(|base| ArmSetup {
            model: opts.preset.model().with_base(base),
            q0: opts.preset.home(),
        })
        .collect();
    let params = opts.params.clone();
    let mut rng = stream_rng(seed, 0x5ce0);
    let obstacles = match task {
        TaskKind::BinLoading => params.bin.walls(),
        TaskKind::Waypoints => vec![],
        _ => {
            let count = opts.obstacle_count.unwrap_or(level as usize);
            (0..count)
                .map(|i| {
                    if i % 2 == 0 {
                        let (pos, vel) = spawn_dynamic(&mut rng, params.workspace_half, params.obstacle_speed);
                        let h = [rng.random_range(0.04..0.08), rng.random_range(0.04..0.08), rng.random_range(0.04..0.08)];
                        Obstacle::cuboid(pos, h).moving(vel)
                    } else {
                        place_static(&mut rng, &arms)
                    }
                })
                .collect()
        }
    };
    let scenario = Scenario {
        task,
        level,
        seed,
        dt: default_dt(),
        t_max: opts.t_max,
        arms,
        obstacles,
        task_params: params,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Waypoint scenario in which every arm must first visit a point inside a
/// common ball of radius `region_radius` above the center, then a goal off
/// to its own side.
pub fn make_shared_region_scenario(seed: u64, opts: &ScenarioOptions) -> Result<Scenario> {
    let mut placeholder = opts.clone();
    placeholder.params.waypoints = vec![vec![[0.0, 0.0, 0.3]]; base_poses(opts.layout).len()];
    let mut scenario = make_scenario_with(TaskKind::Waypoints, 1, seed, &placeholder)?;
    let mut rng = stream_rng(seed, 0x5a2e);
    let hub = scenario.center() + Vector3::new(0.0, 0.0, 0.3);
    let radius = scenario.task_params.region_radius;
    scenario.task_params.waypoints = scenario
        .arms
        .iter()
        .map(|arm| {
            let through = hub + ball_point(&mut rng) * radius;
            let base = arm.model.base.position;
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let az = (hub.y - base.y).atan2(hub.x - base.x) + side * rng.random_range(1.2..1.9);
            let rho = rng.random_range(0.3..0.45);
            let last = base + Vector3::new(rho * az.cos(), rho * az.sin(), 0.3);
            vec![through.into(), last.into()]
        })
        .collect();
    scenario.validate()?;
    Ok(scenario)
}

fn ball_point(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if p.norm_squared() <= 1.0 {
            return p;
        }
    }
}

/// True when `p` is a usable goal for `arm`: within the reach fraction of
/// both base and shoulder and clear of static obstacles.
pub(crate) fn goal_is_admissible(p: &Vector3<f64>, arm: &ArmModel, scenario: &Scenario) -> bool {
    let limit = scenario.task_params.reach_fraction * arm.reach();
    let horizontal = (p.xy() - arm.base.position.xy()).norm();
    (p - arm.base.position).norm() <= limit
        && (p - arm.shoulder()).norm() <= limit
        && horizontal >= 0.2
        && scenario.static_obstacles().all(|o| signed_distance(p, 0.0, o) > 0.1)
}

/// Samples a reaching goal from the scenario's goal region.
pub(crate) fn sample_goal(rng: &mut ChaCha8Rng, arm: usize, scenario: &Scenario) -> Vector3<f64> {
    let model = &scenario.arms[arm].model;
    let base = model.base.position;
    let yaw = {
        let x = model.base.orientation * Vector3::x();
        x.y.atan2(x.x)
    };
    let center = scenario.center();
    let region = scenario.goal_region();
    let radius = scenario.task_params.region_radius;
    for _ in 0..10_000 {
        let p = match region {
            GoalRegion::AroundArm => {
                let az = yaw + rng.random_range(-1.0..1.0) * 2.0 * std::f64::consts::FRAC_PI_3;
                let rho = rng.random_range(0.3..0.6);
                Vector3::new(base.x + rho * az.cos(), base.y + rho * az.sin(), rng.random_range(0.1..0.5))
            }
            GoalRegion::Midpoint | GoalRegion::Center => {
                let mid = if region == GoalRegion::Center { center } else { (base + center) / 2.0 };
                let offset = loop {
                    let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0);
                    if v.norm() <= 1.0 {
                        break v * radius;
                    }
                };
                Vector3::new(mid.x + offset.x, mid.y + offset.y, rng.random_range(0.15..0.45))
            }
        };
        if goal_is_admissible(&p, model, scenario) {
            return p;
        }
    }
    // Fall back to a point straight ahead of the arm at mid height.
    let ahead = model.base.orientation * Vector3::new(0.4, 0.0, 0.0);
    base + ahead + Vector3::new(0.0, 0.0, 0.3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        for task in TaskKind::FAMILIES {
            let a = make_scenario(task, 3, 11).unwrap().to_json();
            let b = make_scenario(task, 3, 11).unwrap().to_json();
            assert_eq!(a, b);
            assert_ne!(a, make_scenario(task, 3, 12).unwrap().to_json());
        }
    }

    #[test]
    fn level_sets_obstacle_count() {
        for level in 1..=5 {
            for task in [TaskKind::ReachingEasy, TaskKind::ReachingHard, TaskKind::Following] {
                assert_eq!(make_scenario(task, level, 5).unwrap().obstacles.len(), level as usize);
            }
        }
    }

    #[test]
    fn invalid_level_is_rejected() {
        assert!(make_scenario(TaskKind::ReachingEasy, 0, 1).is_err());
        assert!(make_scenario(TaskKind::ReachingEasy, 6, 1).is_err());
    }

    #[test]
    fn arms_sit_on_unit_square_corners() {
        let s = make_scenario(TaskKind::BinLoading, 1, 0).unwrap();
        assert_eq!(s.arms.len(), 4);
        for a in &s.arms {
            let p = a.model.base.position;
            assert!((p.x.abs() - 0.5).abs() < 1e-12 && (p.y.abs() - 0.5).abs() < 1e-12);
            // Facing the center.
            let fwd = a.model.base.orientation * Vector3::x();
            assert!((fwd + p.normalize()).norm() < 1e-9);
        }
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let s = make_scenario(TaskKind::Following, 2, 4).unwrap();
        let text = s.to_json();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
        let extra = text.replacen("{", "{\n  \"colour\": 3,", 1);
        assert!(Scenario::from_json(&extra).is_err());
        let bad_level = text.replace("\"level\": 2", "\"level\": 9");
        assert!(Scenario::from_json(&bad_level).is_err());
    }

    #[test]
    fn sampled_goals_are_reachable() {
        for task in [TaskKind::ReachingEasy, TaskKind::ReachingHard] {
            let s = make_scenario(task, 5, 21).unwrap();
            let mut rng = stream_rng(1, 2);
            for arm in 0..4 {
                for _ in 0..200 {
                    let g = sample_goal(&mut rng, arm, &s);
                    let m = &s.arms[arm].model;
                    assert!((g - m.base.position).norm() <= 0.95 * m.reach() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn task_names_parse() {
        for t in TaskKind::FAMILIES {
            assert_eq!(t.name().parse::<TaskKind>().unwrap(), t);
        }
        assert_eq!("bin_loading".parse::<TaskKind>().unwrap(), TaskKind::BinLoading);
        assert!("juggling".parse::<TaskKind>().is_err());
    }

    #[test]
    fn shared_region_waypoints() {
        let opts = ScenarioOptions {
            preset: ArmPreset::Spatial3,
            layout: ArmLayout::HeadOn { separation: 1.0 },
            params: TaskParams {
                region_radius: 0.1,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = make_shared_region_scenario(4, &opts).unwrap();
        assert_eq!(s.task, TaskKind::Waypoints);
        assert!(s.obstacles.is_empty());
        let hub = Vector3::new(0.0, 0.0, 0.3);
        for (arm, w) in s.arms.iter().zip(&s.task_params.waypoints) {
            assert_eq!(w.len(), 2);
            assert!((Vector3::from(w[0]) - hub).norm() <= 0.1);
            let last = Vector3::from(w[1]);
            assert!((last - arm.model.base.position).norm() < arm.model.reach());
        }
        assert_eq!(s, make_shared_region_scenario(4, &opts).unwrap());
    }
}

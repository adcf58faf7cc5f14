//! Stage-cost terms, the masked inter-arm collision term with goal-distance
//! prioritization, and discounted trajectory aggregation.

use nalgebra::{Isometry3, Vector3};
use serde::{Deserialize, Serialize};

use crate::kinematics::{self, ArmModel, JointLimits, Pose, SphereSet};
use crate::mppi::RolloutObjective;
use crate::world::{signed_distance, Obstacle};

/// Weights and hyperparameters of the stage cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub pose: f64,
    pub stop: f64,
    pub joint_limit: f64,
    pub manipulability: f64,
    pub collision: f64,
    /// Weight of the inter-arm (shared-intent) collision term.
    pub dynamic: f64,
    /// Safety buffer below which inter-arm distances are penalized (m).
    pub buffer: f64,
    /// Trust exponent of the prioritization factor.
    pub trust: f64,
    pub discount: f64,
    pub joint_buffer: f64,
    pub goal_tolerance: f64,
    /// Buffer for environment obstacles (m).
    pub obstacle_buffer: f64,
    /// Buffer for self-collision between non-adjacent links (m).
    pub self_buffer: f64,
    pub orientation_weight: f64,
    /// Manipulability at or above which no singularity penalty applies.
    pub manipulability_ref: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            pose: 100.0,
            stop: 20.0,
            joint_limit: 100.0,
            manipulability: 1.0,
            collision: 1000.0,
            dynamic: 5000.0,
            buffer: 0.3,
            trust: 3.0,
            discount: 0.98,
            joint_buffer: 0.1,
            goal_tolerance: 0.05,
            obstacle_buffer: 0.1,
            self_buffer: 0.05,
            orientation_weight: 0.3,
            manipulability_ref: 0.1,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let nonneg = [
            self.pose,
            self.stop,
            self.joint_limit,
            self.manipulability,
            self.collision,
            self.dynamic,
            self.trust,
            self.joint_buffer,
            self.orientation_weight,
        ];
        if nonneg.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(crate::Error::InvalidConfig("cost weights must be finite and >= 0".into()));
        }
        let positive = [self.buffer, self.obstacle_buffer, self.self_buffer, self.manipulability_ref];
        if positive.iter().any(|b| !(*b > 0.0)) {
            return Err(crate::Error::InvalidConfig("buffers must be > 0".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(crate::Error::InvalidConfig("discount must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    Position,
    FullPose,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub target: Pose,
    pub kind: GoalKind,
}

impl GoalSpec {
    pub fn position(p: Vector3<f64>) -> Self {
        GoalSpec {
            target: Pose::new(p, Default::default()),
            kind: GoalKind::Position,
        }
    }
}

/// Distance to the goal position, plus `orientation_weight * (1 - |<q_ee, q_goal>|)`
/// for full-pose goals.
pub fn pose_cost(ee: &Pose, goal: &GoalSpec, orientation_weight: f64) -> f64 {
    let d = (ee.position - goal.target.position).norm();
    match goal.kind {
        GoalKind::Position => d,
        GoalKind::FullPose => {
            let dot = ee.orientation.quaternion().dot(goal.target.orientation.quaternion()).abs();
            d + orientation_weight * (1.0 - dot.min(1.0))
        }
    }
}

/// Squared excess of joint speed over the speed from which full braking
/// still stops the joint by the end of the horizon.
pub fn stop_cost(qd: &[f64], h: usize, limits: &JointLimits, horizon: usize, dt: f64) -> f64 {
    let remaining = horizon.saturating_sub(h + 1) as f64;
    qd.iter()
        .zip(&limits.a_max)
        .map(|(v, a)| {
            let excess = v.abs() - a * dt * remaining;
            if excess > 0.0 {
                excess * excess
            } else {
                0.0
            }
        })
        .sum()
}

/// Quadratic penetration past `[q_min + buffer, q_max - buffer]`.
pub fn joint_limit_cost(q: &[f64], limits: &JointLimits, buffer: f64) -> f64 {
    q.iter()
        .enumerate()
        .map(|(j, &x)| {
            let lo = limits.q_min[j] + buffer;
            let hi = limits.q_max[j] - buffer;
            let over = if x > hi {
                x - hi
            } else if x < lo {
                lo - x
            } else {
                0.0
            };
            over * over
        })
        .sum()
}

/// Linear ramp from 1 at a singularity to 0 at `manip_ref`.
pub fn manip_cost_from_value(manipulability: f64, manip_ref: f64) -> f64 {
    (1.0 - manipulability / manip_ref).max(0.0)
}

pub fn manip_cost(model: &ArmModel, q: &[f64], manip_ref: f64) -> crate::Result<f64> {
    Ok(manip_cost_from_value(kinematics::manipulability(model, q)?, manip_ref))
}

/// `relu(1 - x / buffer)`: zero beyond the buffer, one at contact, above one
/// when penetrating.
#[inline]
pub fn mask(x: f64, buffer: f64) -> f64 {
    (1.0 - x / buffer).max(0.0)
}

/// Minimum surface distance between two sphere collections.
pub fn min_sphere_distance(a: &[Vector3<f64>], ra: &[f64], b: &[Vector3<f64>], rb: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for (ca, ra) in a.iter().zip(ra) {
        for (cb, rb) in b.iter().zip(rb) {
            let d = (ca - cb).norm() - (ra + rb);
            if d < best {
                best = d;
            }
        }
    }
    best
}

// Slack on the squared-distance skip test so rounding never drops a pair
// whose computed distance would land inside the buffer.
const SKIP_SLACK: f64 = 1.0 + 1e-9;

/// Same as [`min_sphere_distance`] for pairs closer than `buffer`; pairs
/// farther apart are skipped, and infinity is returned when all are.
fn near_sphere_distance(a: &[Vector3<f64>], ra: &[f64], b: &[Vector3<f64>], rb: &[f64], buffer: f64) -> f64 {
    let mut best = f64::INFINITY;
    for (ca, ra) in a.iter().zip(ra) {
        for (cb, rb) in b.iter().zip(rb) {
            let diff = ca - cb;
            let reach = ra + rb + buffer;
            if diff.norm_squared() > reach * reach * SKIP_SLACK {
                continue;
            }
            let d = diff.norm() - (ra + rb);
            if d < best {
                best = d;
            }
        }
    }
    best
}

fn obstacle_term(centers: &[Vector3<f64>], radii: &[f64], obstacles: &[Obstacle], buffer: f64) -> f64 {
    obstacles
        .iter()
        .map(|o| {
            let bound = o.bounding_radius() + buffer;
            let d = centers
                .iter()
                .zip(radii)
                .filter(|(c, r)| {
                    let reach = bound + *r;
                    (*c - o.pose.position).norm_squared() <= reach * reach * SKIP_SLACK
                })
                .map(|(c, r)| signed_distance(c, *r, o))
                .fold(f64::INFINITY, f64::min);
            mask(d, buffer)
        })
        .sum()
}

/// Sum over obstacles of the masked closest-sphere distance.
pub fn static_collision_cost(spheres: &SphereSet, obstacles: &[Obstacle], buffer: f64) -> f64 {
    obstacle_term(&spheres.centers, &spheres.radii, obstacles, buffer)
}

fn self_term(
    centers: &[Vector3<f64>],
    radii: &[f64],
    ranges: &[std::ops::Range<usize>],
    pairs: &[(usize, usize)],
    buffer: f64,
) -> f64 {
    pairs
        .iter()
        .map(|&(a, b)| {
            let (ra, rb) = (ranges[a].clone(), ranges[b].clone());
            let d = near_sphere_distance(&centers[ra.clone()], &radii[ra], &centers[rb.clone()], &radii[rb], buffer);
            mask(d, buffer)
        })
        .sum()
}

/// Sum over non-excluded link pairs of the masked inter-link distance.
pub fn self_collision_cost(spheres: &SphereSet, model: &ArmModel, buffer: f64) -> f64 {
    self_term(
        &spheres.centers,
        &spheres.radii,
        &model.link_sphere_ranges(),
        &model.self_collision_pairs(),
        buffer,
    )
}

const PRIORITY_EPS: f64 = 1e-3;

/// Ratio of own to other goal distance raised to `trust`: below one for the
/// arm closer to its goal, which may then discount the other's intent.
pub fn priority_factor(d_self: f64, d_other: f64, trust: f64) -> f64 {
    if trust == 0.0 {
        return 1.0;
    }
    let ratio = d_self.max(PRIORITY_EPS) / d_other.max(PRIORITY_EPS);
    ratio.powf(trust).clamp(1e-3, 1e3)
}

/// Weighted sum over other arms of the masked arm-to-arm distance at one
/// horizon step.
pub fn dynamic_obstacle_cost(spheres: &SphereSet, intents: &[(&SphereSet, f64)], buffer: f64) -> f64 {
    intents
        .iter()
        .map(|(other, alpha)| {
            alpha * mask(min_sphere_distance(&spheres.centers, &spheres.radii, &other.centers, &other.radii), buffer)
        })
        .sum()
}

/// Unweighted stage-cost terms at one rollout state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTerms {
    pub pose: f64,
    pub stop: f64,
    pub joint_limit: f64,
    pub manipulability: f64,
    pub collision: f64,
    pub self_collision: f64,
    pub dynamic: f64,
}

impl StageTerms {
    pub fn weighted(&self, w: &CostWeights) -> f64 {
        w.pose * self.pose
            + w.stop * self.stop
            + w.joint_limit * self.joint_limit
            + w.manipulability * self.manipulability
            + w.collision * (self.collision + self.self_collision)
            + w.dynamic * self.dynamic
    }
}

/// Multiplier turning the last stage cost into the terminal cost.
pub fn terminal_scale(discount: f64, horizon: usize) -> f64 {
    if discount < 1.0 {
        1.0 / (1.0 - discount)
    } else {
        horizon as f64
    }
}

/// Discounted stage costs for `h = 0..H-1` plus the undiscounted terminal
/// cost; `stage` holds the first `H - 1` stage costs.
pub fn trajectory_cost(stage: &[f64], terminal: f64, discount: f64) -> f64 {
    let mut total = 0.0;
    let mut g = 1.0;
    for c in stage {
        total += g * c;
        g *= discount;
    }
    total + terminal
}

/// Another arm's published sphere trajectory as seen by one planner.
#[derive(Clone, Debug)]
pub struct Intent<'a> {
    pub trajectory: &'a [Vec<Vector3<f64>>],
    pub radii: &'a [f64],
    pub alpha: f64,
    /// Added to the rollout step to index `trajectory`; accounts for the
    /// intent having been published `offset` steps earlier.
    pub offset: usize,
    bounds: Vec<(Vector3<f64>, f64)>,
}

fn bounding_sphere(centers: &[Vector3<f64>], radii: &[f64]) -> (Vector3<f64>, f64) {
    let c = centers.iter().sum::<Vector3<f64>>() / centers.len().max(1) as f64;
    let r = centers
        .iter()
        .zip(radii)
        .map(|(x, r)| (x - c).norm() + r)
        .fold(0.0, f64::max);
    (c, r)
}

impl<'a> Intent<'a> {
    pub fn new(trajectory: &'a [Vec<Vector3<f64>>], radii: &'a [f64], alpha: f64, offset: usize) -> Self {
        let bounds = trajectory.iter().map(|c| bounding_sphere(c, radii)).collect();
        Intent {
            trajectory,
            radii,
            alpha,
            offset,
            bounds,
        }
    }

    fn index(&self, h: usize) -> usize {
        (h + self.offset).min(self.trajectory.len() - 1)
    }
}

/// Everything one arm's planner needs to score a rollout state.
pub struct ArmCost<'a> {
    pub model: &'a ArmModel,
    pub goal: GoalSpec,
    pub obstacles: &'a [Obstacle],
    pub intents: Vec<Intent<'a>>,
    pub weights: &'a CostWeights,
    pub horizon: usize,
    pub dt: f64,
    radii: Vec<f64>,
    ranges: Vec<std::ops::Range<usize>>,
    self_pairs: Vec<(usize, usize)>,
}

pub struct ArmScratch {
    frames: Vec<Isometry3<f64>>,
    centers: Vec<Vector3<f64>>,
}

impl<'a> ArmCost<'a> {
    pub fn new(
        model: &'a ArmModel,
        goal: GoalSpec,
        obstacles: &'a [Obstacle],
        intents: Vec<Intent<'a>>,
        weights: &'a CostWeights,
        horizon: usize,
        dt: f64,
    ) -> Self {
        ArmCost {
            model,
            goal,
            obstacles,
            intents: intents.into_iter().filter(|i| !i.trajectory.is_empty()).collect(),
            weights,
            horizon,
            dt,
            radii: model.radii(),
            ranges: model.link_sphere_ranges(),
            self_pairs: model.self_collision_pairs(),
        }
    }

    fn dynamic_term(&self, centers: &[Vector3<f64>], h: usize) -> f64 {
        if self.intents.is_empty() {
            return 0.0;
        }
        let (own_c, own_r) = bounding_sphere(centers, &self.radii);
        let buffer = self.weights.buffer;
        let mut total = 0.0;
        for intent in &self.intents {
            let k = intent.index(h);
            let (c, r) = intent.bounds[k];
            // Bounding spheres already farther apart than the buffer: the mask is zero.
            if (own_c - c).norm() - (own_r + r) >= buffer {
                continue;
            }
            let d = near_sphere_distance(centers, &self.radii, &intent.trajectory[k], intent.radii, buffer);
            total += intent.alpha * mask(d, buffer);
        }
        total
    }

    /// All terms evaluated unconditionally.
    pub fn terms(&self, q: &[f64], qd: &[f64], h: usize) -> StageTerms {
        let mut s = self.scratch();
        let ee = kinematics::link_frames(self.model, q, &mut s.frames);
        kinematics::sphere_centers_into(self.model, &s.frames, &mut s.centers);
        let w = self.weights;
        StageTerms {
            pose: pose_cost(&Pose::from_isometry(&ee), &self.goal, w.orientation_weight),
            stop: stop_cost(qd, h, &self.model.limits, self.horizon, self.dt),
            joint_limit: joint_limit_cost(q, &self.model.limits, w.joint_buffer),
            manipulability: manip_cost_from_value(
                kinematics::manipulability_from_frames(self.model, &s.frames, &ee.translation.vector),
                w.manipulability_ref,
            ),
            collision: obstacle_term(&s.centers, &self.radii, self.obstacles, w.obstacle_buffer),
            self_collision: self_term(&s.centers, &self.radii, &self.ranges, &self.self_pairs, w.self_buffer),
            dynamic: self.dynamic_term(&s.centers, h),
        }
    }
}

impl RolloutObjective for ArmCost<'_> {
    type Scratch = ArmScratch;

    fn scratch(&self) -> ArmScratch {
        ArmScratch {
            frames: Vec::with_capacity(self.model.dof()),
            centers: Vec::with_capacity(self.radii.len()),
        }
    }

    /// Weighted stage cost; terms with zero weight are skipped.
    fn stage_cost(&self, q: &[f64], qd: &[f64], h: usize, s: &mut ArmScratch) -> f64 {
        let w = self.weights;
        let ee = kinematics::link_frames(self.model, q, &mut s.frames);
        let mut cost = 0.0;
        if w.pose > 0.0 {
            cost += w.pose * pose_cost(&Pose::from_isometry(&ee), &self.goal, w.orientation_weight);
        }
        if w.stop > 0.0 {
            cost += w.stop * stop_cost(qd, h, &self.model.limits, self.horizon, self.dt);
        }
        if w.joint_limit > 0.0 {
            cost += w.joint_limit * joint_limit_cost(q, &self.model.limits, w.joint_buffer);
        }
        if w.manipulability > 0.0 {
            let m = kinematics::manipulability_from_frames(self.model, &s.frames, &ee.translation.vector);
            cost += w.manipulability * manip_cost_from_value(m, w.manipulability_ref);
        }
        if w.collision > 0.0 || w.dynamic > 0.0 {
            kinematics::sphere_centers_into(self.model, &s.frames, &mut s.centers);
        }
        if w.collision > 0.0 {
            let env = obstacle_term(&s.centers, &self.radii, self.obstacles, w.obstacle_buffer);
            let own = self_term(&s.centers, &self.radii, &self.ranges, &self.self_pairs, w.self_buffer);
            cost += w.collision * (env + own);
        }
        if w.dynamic > 0.0 {
            cost += w.dynamic * self.dynamic_term(&s.centers, h);
        }
        cost
    }
}

/// One objective over the concatenated joint vector of several arms: the
/// sum of each arm's stage cost plus the masked distance between every
/// pair of arms, weighted like the inter-arm term with no prioritization.
pub struct CoupledCost<'a> {
    pub arms: Vec<ArmCost<'a>>,
    offsets: Vec<usize>,
}

impl<'a> CoupledCost<'a> {
    pub fn new(arms: Vec<ArmCost<'a>>) -> Self {
        let mut offsets = vec![0];
        for a in &arms {
            offsets.push(offsets.last().unwrap() + a.model.dof());
        }
        CoupledCost { arms, offsets }
    }

    pub fn dof(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

impl RolloutObjective for CoupledCost<'_> {
    type Scratch = Vec<ArmScratch>;

    fn scratch(&self) -> Vec<ArmScratch> {
        self.arms.iter().map(|a| a.scratch()).collect()
    }

    fn stage_cost(&self, q: &[f64], qd: &[f64], h: usize, s: &mut Vec<ArmScratch>) -> f64 {
        let mut cost = 0.0;
        for (i, arm) in self.arms.iter().enumerate() {
            let r = self.offsets[i]..self.offsets[i + 1];
            cost += arm.stage_cost(&q[r.clone()], &qd[r], h, &mut s[i]);
            let w = arm.weights;
            if w.collision == 0.0 && w.dynamic == 0.0 {
                let ArmScratch { frames, centers } = &mut s[i];
                kinematics::sphere_centers_into(arm.model, frames, centers);
            }
        }
        for i in 0..self.arms.len() {
            let w = self.arms[i].weights;
            if w.dynamic == 0.0 {
                continue;
            }
            for j in i + 1..self.arms.len() {
                let d = near_sphere_distance(&s[i].centers, &self.arms[i].radii, &s[j].centers, &self.arms[j].radii, w.buffer);
                cost += w.dynamic * mask(d, w.buffer);
            }
        }
        cost
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skipping_far_pairs_leaves_the_mask_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let a = random_set(&mut rng, 5, 0);
            let b = random_set(&mut rng, 4, 1);
            let buffer = rng.random_range(0.01..0.5);
            let exact = mask(min_sphere_distance(&a.centers, &a.radii, &b.centers, &b.radii), buffer);
            let fast = mask(near_sphere_distance(&a.centers, &a.radii, &b.centers, &b.radii, buffer), buffer);
            assert_eq!(exact.to_bits(), fast.to_bits());
        }
    }
    use crate::kinematics::compute_spheres;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, owner: usize) -> SphereSet {
        SphereSet {
            centers: (0..n)
                .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)))
                .collect(),
            radii: (0..n).map(|_| rng.random_range(0.02..0.1)).collect(),
            owner,
        }
    }

    #[test]
    fn pose_cost_examples() {
        let g = GoalSpec::position(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(pose_cost(&g.target, &g, 0.3), 0.0);
        assert!((pose_cost(&Pose::identity(), &g, 0.3) - 1.0).abs() < 1e-15);
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let flipped = UnitQuaternion::new_unchecked(-q.into_inner());
        let full = GoalSpec {
            target: Pose::new(Vector3::zeros(), q),
            kind: GoalKind::FullPose,
        };
        assert!(pose_cost(&Pose::new(Vector3::zeros(), flipped), &full, 0.3).abs() < 1e-15);
    }

    #[test]
    fn stop_cost_examples() {
        let lim = JointLimits::uniform(2, (-1.0, 1.0), 2.0, 6.0);
        assert_eq!(stop_cost(&[0.0, 0.0], 3, &lim, 10, 0.1), 0.0);
        assert!((stop_cost(&[0.5, -0.2], 9, &lim, 10, 0.1) - 0.29).abs() < 1e-15);
        // v_stop = a_max * dt * (H - 1 - h) = 6 * 0.5 * 2 = 6.
        assert_eq!(stop_cost(&[6.0, -6.0], 7, &lim, 10, 0.5), 0.0);
    }

    #[test]
    fn joint_limit_examples() {
        let lim = JointLimits::uniform(2, (-1.0, 1.0), 2.0, 6.0);
        assert_eq!(joint_limit_cost(&[0.0, 0.2], &lim, 0.1), 0.0);
        assert!((joint_limit_cost(&[1.0, 0.0], &lim, 0.1) - 0.01).abs() < 1e-15);
        assert!((joint_limit_cost(&[-1.0, 0.0], &lim, 0.1) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn manip_cost_examples() {
        assert_eq!(manip_cost_from_value(0.2, 0.1), 0.0);
        assert_eq!(manip_cost_from_value(0.0, 0.1), 1.0);
        assert!((manip_cost_from_value(0.05, 0.1) - 0.5).abs() < 1e-15);
        let m = ArmModel::planar(&[1.0, 1.0], 0.1);
        assert_eq!(manip_cost(&m, &[0.0, 0.0], 0.1).unwrap(), 1.0);
    }

    #[test]
    fn mask_examples() {
        assert_eq!(mask(0.3, 0.3), 0.0);
        assert_eq!(mask(0.0, 0.3), 1.0);
        assert!((mask(0.15, 0.3) - 0.5).abs() < 1e-15);
        assert!(mask(-0.1, 0.3) > 1.0);
    }

    #[test]
    fn priority_examples() {
        assert_eq!(priority_factor(0.7, 0.01, 0.0), 1.0);
        assert!((priority_factor(0.2, 0.1, 3.0) - 8.0).abs() < 1e-12);
        assert!((priority_factor(0.2, 0.1, 3.0) * priority_factor(0.1, 0.2, 3.0) - 1.0).abs() < 1e-12);
        assert_eq!(priority_factor(0.0, 0.0, 3.0), 1.0);
        assert_eq!(priority_factor(5.0, 0.0, 3.0), 1e3);
    }

    #[test]
    fn trajectory_cost_examples() {
        assert!((trajectory_cost(&[2.0; 4], 3.0, 1.0) - 11.0).abs() < 1e-12);
        assert_eq!(trajectory_cost(&[0.0; 4], 0.0, 0.9), 0.0);
        assert!((trajectory_cost(&[1.0, 1.0], 2.0, 0.5) - 3.5).abs() < 1e-12);
        assert_eq!(terminal_scale(1.0, 40), 40.0);
        assert!((terminal_scale(0.98, 40) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn pair_distance_arithmetic() {
        let a = SphereSet {
            centers: vec![Vector3::zeros()],
            radii: vec![0.1],
            owner: 0,
        };
        let b = SphereSet {
            centers: vec![Vector3::new(1.0, 0.0, 0.0)],
            radii: vec![0.2],
            owner: 1,
        };
        assert!((min_sphere_distance(&a.centers, &a.radii, &b.centers, &b.radii) - 0.7).abs() < 1e-15);
        assert_eq!(dynamic_obstacle_cost(&a, &[(&b, 1.0)], 0.3), 0.0);
        assert!((dynamic_obstacle_cost(&a, &[(&b, 2.0)], 1.4) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn collision_examples() {
        let m = ArmModel::planar(&[0.4, 0.4], 0.05);
        let s = compute_spheres(&m, &[0.0, 0.0]).unwrap();
        let far = [Obstacle::sphere(Vector3::new(0.0, 2.0, 0.0), 0.1)];
        assert_eq!(static_collision_cost(&s, &far, 0.3), 0.0);
        // Touching the tip sphere (center 0.8, radius 0.05).
        let touching = [Obstacle::sphere(Vector3::new(0.95, 0.0, 0.0), 0.1)];
        assert!((static_collision_cost(&s, &touching, 0.3) - 1.0).abs() < 1e-12);
        assert_eq!(self_collision_cost(&s, &m, 0.05), 0.0);
    }

    #[test]
    fn adjacent_links_never_count() {
        // Two links folded exactly onto each other: only an adjacent pair exists.
        let m = ArmModel::planar(&[0.4, 0.4], 0.05);
        let s = compute_spheres(&m, &[0.0, std::f64::consts::PI]).unwrap();
        assert_eq!(self_collision_cost(&s, &m, 0.05), 0.0);
        let m3 = ArmModel::planar(&[0.4, 0.4, 0.4], 0.05);
        let s3 = compute_spheres(&m3, &[0.0, 3.0, 3.0]).unwrap();
        assert!(self_collision_cost(&s3, &m3, 0.05) > 0.0);
    }

    #[test]
    fn weighted_sum_of_terms() {
        let w = CostWeights::default();
        let t = StageTerms {
            pose: 0.5,
            stop: 0.1,
            joint_limit: 0.01,
            manipulability: 0.2,
            collision: 0.3,
            self_collision: 0.4,
            dynamic: 0.7,
        };
        let expected = 100.0 * 0.5 + 20.0 * 0.1 + 100.0 * 0.01 + 1.0 * 0.2 + 1000.0 * 0.7 + 5000.0 * 0.7;
        assert!((t.weighted(&w) - expected).abs() < 1e-9);
        let zero = CostWeights {
            pose: 0.0,
            stop: 0.0,
            joint_limit: 0.0,
            manipulability: 0.0,
            collision: 0.0,
            dynamic: 0.0,
            ..w
        };
        assert_eq!(t.weighted(&zero), 0.0);
    }

    #[test]
    fn arm_stage_cost_matches_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = ArmModel::spatial3();
        let weights = CostWeights::default();
        let obstacles = vec![
            Obstacle::cuboid(Vector3::new(0.3, 0.1, 0.3), [0.1, 0.1, 0.1]),
            Obstacle::sphere(Vector3::new(0.2, -0.2, 0.4), 0.08),
        ];
        let other_model = ArmModel::spatial3().with_base(Pose::from_position_yaw(Vector3::new(0.8, 0.0, 0.0), 3.1));
        let traj: Vec<Vec<Vector3<f64>>> = (0..5)
            .map(|h| compute_spheres(&other_model, &[0.1 * h as f64, 1.0, -1.5]).unwrap().centers)
            .collect();
        let radii = other_model.radii();
        for _ in 0..200 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let qd: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let h = rng.random_range(0..5);
            let cost = ArmCost::new(
                &model,
                GoalSpec::position(Vector3::new(0.4, 0.1, 0.3)),
                &obstacles,
                vec![Intent::new(&traj, &radii, 1.7, 1)],
                &weights,
                5,
                1.0 / 60.0,
            );
            let terms = cost.terms(&q, &qd, h);
            let direct = {
                let mut s = cost.scratch();
                cost.stage_cost(&q, &qd, h, &mut s)
            };
            assert!((terms.weighted(&weights) - direct).abs() <= 1e-9 * direct.max(1.0));
            // Independent recomputation of each term from the public helpers.
            let fk = kinematics::forward_kinematics(&model, &q).unwrap();
            let spheres = compute_spheres(&model, &q).unwrap();
            assert_eq!(terms.pose, pose_cost(&fk.end_effector, &cost.goal, 0.3));
            assert!((terms.collision - static_collision_cost(&spheres, &obstacles, weights.obstacle_buffer)).abs() < 1e-12);
            assert!((terms.self_collision - self_collision_cost(&spheres, &model, weights.self_buffer)).abs() < 1e-12);
            let other = SphereSet {
                centers: traj[(h + 1).min(4)].clone(),
                radii: radii.clone(),
                owner: 1,
            };
            assert!((terms.dynamic - dynamic_obstacle_cost(&spheres, &[(&other, 1.7)], weights.buffer)).abs() < 1e-12);
            assert!((terms.manipulability - manip_cost(&model, &q, 0.1).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn terms_are_finite_and_nonnegative_under_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let model = ArmModel::desk6();
        let weights = CostWeights::default();
        let obstacles = vec![Obstacle::cuboid(Vector3::new(0.3, 0.0, 0.3), [0.1, 0.2, 0.1])];
        let other = random_set(&mut rng, 12, 1);
        let traj = vec![other.centers.clone()];
        for _ in 0..10_000 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-4.0..4.0)).collect();
            let qd: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let cost = ArmCost::new(
                &model,
                GoalSpec::position(Vector3::new(rng.random_range(-1.0..1.0), 0.2, 0.3)),
                &obstacles,
                vec![Intent::new(&traj, &other.radii, rng.random_range(1e-3..1e3), 0)],
                &weights,
                40,
                1.0 / 60.0,
            );
            let t = cost.terms(&q, &qd, rng.random_range(0..40));
            for v in [t.pose, t.stop, t.joint_limit, t.manipulability, t.collision, t.self_collision, t.dynamic] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    /// Brute-force versions of the collision terms: plain nested loops over
    /// every pair, no pruning.
    fn naive_static(s: &SphereSet, obs: &[Obstacle], b: f64) -> f64 {
        let mut total = 0.0;
        for o in obs {
            let mut best = f64::INFINITY;
            for i in 0..s.len() {
                best = best.min(signed_distance(&s.centers[i], s.radii[i], o));
            }
            total += (1.0 - best / b).max(0.0);
        }
        total
    }

    fn naive_dynamic(s: &SphereSet, others: &[(SphereSet, f64)], b: f64) -> f64 {
        let mut total = 0.0;
        for (o, alpha) in others {
            let mut best = f64::INFINITY;
            for i in 0..s.len() {
                for j in 0..o.len() {
                    best = best.min((s.centers[i] - o.centers[j]).norm() - s.radii[i] - o.radii[j]);
                }
            }
            total += alpha * (1.0 - best / b).max(0.0);
        }
        total
    }

    #[test]
    fn collision_terms_match_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = random_set(&mut rng, 9, 0);
            let obs: Vec<_> = (0..3)
                .map(|_| {
                    let c = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5);
                    if rng.random_bool(0.5) {
                        Obstacle::sphere(c, rng.random_range(0.05..0.3))
                    } else {
                        Obstacle::cuboid(c, [rng.random_range(0.05..0.3); 3])
                    }
                })
                .collect();
            let others: Vec<_> = (1..4).map(|k| (random_set(&mut rng, 7, k), rng.random_range(0.1..5.0))).collect();
            let b = rng.random_range(0.05..0.5);
            assert!((static_collision_cost(&s, &obs, b) - naive_static(&s, &obs, b)).abs() < 1e-9);
            let refs: Vec<_> = others.iter().map(|(o, a)| (o, *a)).collect();
            assert!((dynamic_obstacle_cost(&s, &refs, b) - naive_dynamic(&s, &others, b)).abs() < 1e-9);
        }
    }

    #[test]
    fn coupled_cost_is_sum_plus_pair_term() {
        let a = ArmModel::spatial3().with_base(Pose::from_position_yaw(Vector3::new(-0.4, 0.0, 0.0), 0.0));
        let b = ArmModel::spatial3().with_base(Pose::from_position_yaw(Vector3::new(0.4, 0.0, 0.0), std::f64::consts::PI));
        let w = CostWeights::default();
        let goal = GoalSpec::position(Vector3::new(0.0, 0.0, 0.3));
        let make = |m| ArmCost::new(m, goal, &[], vec![], &w, 10, 1.0 / 60.0);
        let coupled = CoupledCost::new(vec![make(&a), make(&b)]);
        assert_eq!(coupled.dof(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scratch = coupled.scratch();
        for _ in 0..100 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
            let qd: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (ca, cb) = (make(&a), make(&b));
            let sa = compute_spheres(&a, &q[..3]).unwrap();
            let sb = compute_spheres(&b, &q[3..]).unwrap();
            let pair = mask(min_sphere_distance(&sa.centers, &sa.radii, &sb.centers, &sb.radii), w.buffer);
            let expected = ca.terms(&q[..3], &qd[..3], 2).weighted(&w) + cb.terms(&q[3..], &qd[3..], 2).weighted(&w) + w.dynamic * pair;
            let got = coupled.stage_cost(&q, &qd, 2, &mut scratch);
            assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }

    proptest! {
        #[test]
        fn mask_is_monotone_and_continuous(x in -1.0f64..1.0, dx in 0.0f64..0.1, b in 0.01f64..1.0) {
            prop_assert!(mask(x + dx, b) <= mask(x, b));
            prop_assert!((mask(x + dx, b) - mask(x, b)).abs() <= dx / b + 1e-12);
            prop_assert_eq!(mask(x, b) == 0.0, x >= b);
        }

        #[test]
        fn priority_is_scale_invariant(a in 0.01f64..1.0, b in 0.01f64..1.0, k in 0.1f64..10.0, tau in 0.0f64..3.0) {
            let base = priority_factor(a, b, tau);
            prop_assume!(base > 1e-3 && base < 1e3);
            prop_assume!(a * k > 1e-3 && b * k > 1e-3);
            prop_assert!((priority_factor(a * k, b * k, tau) - base).abs() <= 1e-12 * base.max(1.0));
        }

        #[test]
        fn trajectory_cost_is_linear(a in proptest::collection::vec(0.0f64..10.0, 5), b in proptest::collection::vec(0.0f64..10.0, 5), s in -3.0f64..3.0, g in 0.1f64..1.0) {
            let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
            let lhs = trajectory_cost(&combo, 0.0, g);
            let rhs = trajectory_cost(&a, 0.0, g) + s * trajectory_cost(&b, 0.0, g);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}

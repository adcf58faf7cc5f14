//! Serial-chain arm model: forward kinematics, geometric Jacobian,
//! sphere decomposition and manipulability.
//!
//! A chain is a list of revolute joints. Joint `j` sits at a fixed offset
//! `origin` from the previous link frame (the base for `j == 0`) and rotates
//! about its local `axis`. The frame produced by joint `j` is link `j`; the
//! end-effector is the last link frame composed with a fixed `tool` offset.

use nalgebra::{Dyn, Isometry3, Matrix2, Matrix3, OMatrix, Translation3, Unit, UnitQuaternion, Vector3, U6};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Rigid pose in the world (or a parent frame).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    position: [f64; 3],
    /// `[w, x, y, z]`
    #[serde(default = "identity_wxyz")]
    orientation: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl TryFrom<PoseRepr> for Pose {
    type Error = String;

    fn try_from(r: PoseRepr) -> std::result::Result<Self, String> {
        let [w, x, y, z] = r.orientation;
        let quat = nalgebra::Quaternion::new(w, x, y, z);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(format!("orientation quaternion norm {norm} is not 1"));
        }
        if r.position.iter().any(|v| !v.is_finite()) {
            return Err("non-finite position".into());
        }
        Ok(Pose {
            position: Vector3::from(r.position),
            // Keep already-unit components untouched so files round-trip exactly.
            orientation: if (norm - 1.0).abs() < 1e-12 {
                UnitQuaternion::new_unchecked(quat)
            } else {
                UnitQuaternion::from_quaternion(quat)
            },
        })
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.orientation.quaternion();
        PoseRepr {
            position: p.position.into(),
            orientation: [q.w, q.i, q.j, q.k],
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose { position, orientation }
    }

    pub fn from_position(x: f64, y: f64, z: f64) -> Self {
        Pose {
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::identity(),
        }
    }

    /// Position plus a rotation of `yaw` radians about world z.
    pub fn from_position_yaw(position: Vector3<f64>, yaw: f64) -> Self {
        Pose {
            position,
            orientation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Pose {
            position: iso.translation.vector,
            orientation: iso.rotation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }
}

/// Per-joint position, velocity and acceleration limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLimits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub v_max: Vec<f64>,
    pub a_max: Vec<f64>,
}

impl JointLimits {
    /// Same limits on every joint.
    pub fn uniform(n: usize, q: (f64, f64), v_max: f64, a_max: f64) -> Self {
        JointLimits {
            q_min: vec![q.0; n],
            q_max: vec![q.1; n],
            v_max: vec![v_max; n],
            a_max: vec![a_max; n],
        }
    }

    pub fn dof(&self) -> usize {
        self.q_min.len()
    }

    /// Stacks the limits of several chains into one composite joint space.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a JointLimits>) -> Self {
        let mut out = JointLimits {
            q_min: vec![],
            q_max: vec![],
            v_max: vec![],
            a_max: vec![],
        };
        for p in parts {
            out.q_min.extend_from_slice(&p.q_min);
            out.q_max.extend_from_slice(&p.q_max);
            out.v_max.extend_from_slice(&p.v_max);
            out.a_max.extend_from_slice(&p.a_max);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q_min.len();
        check_len("q_max", n, self.q_max.len())?;
        check_len("v_max", n, self.v_max.len())?;
        check_len("a_max", n, self.a_max.len())?;
        for j in 0..n {
            if !(self.q_min[j] < self.q_max[j]) {
                return Err(Error::InvalidModel(format!("joint {j}: q_min must be < q_max")));
            }
            if !(self.v_max[j] > 0.0 && self.a_max[j] > 0.0) {
                return Err(Error::InvalidModel(format!("joint {j}: v_max and a_max must be > 0")));
            }
        }
        Ok(())
    }
}

/// One revolute joint: fixed offset from the parent frame, then a rotation
/// about `axis` (expressed in the offset frame).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "JointRepr", into = "JointRepr")]
pub struct Joint {
    pub origin: Pose,
    pub axis: Unit<Vector3<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointRepr {
    origin: Pose,
    axis: [f64; 3],
}

impl TryFrom<JointRepr> for Joint {
    type Error = String;

    fn try_from(r: JointRepr) -> std::result::Result<Self, String> {
        let axis = Vector3::from(r.axis);
        let n = axis.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(format!("joint axis norm {n} is not 1"));
        }
        Ok(Joint {
            origin: r.origin,
            axis: Unit::new_normalize(axis),
        })
    }
}

impl From<Joint> for JointRepr {
    fn from(j: Joint) -> Self {
        JointRepr {
            origin: j.origin,
            axis: j.axis.into_inner().into(),
        }
    }
}

impl Joint {
    pub fn new(origin: Pose, axis: Vector3<f64>) -> Self {
        Joint {
            origin,
            axis: Unit::new_normalize(axis),
        }
    }
}

/// Collision sphere rigidly attached to a link, in link coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinkSphereRepr", into = "LinkSphereRepr")]
pub struct LinkSphere {
    pub center: Vector3<f64>,
    pub radius: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSphereRepr {
    center: [f64; 3],
    radius: f64,
}

impl TryFrom<LinkSphereRepr> for LinkSphere {
    type Error = String;

    fn try_from(r: LinkSphereRepr) -> std::result::Result<Self, String> {
        if !(r.radius > 0.0 && r.radius.is_finite()) {
            return Err(format!("sphere radius {} must be positive", r.radius));
        }
        Ok(LinkSphere {
            center: Vector3::from(r.center),
            radius: r.radius,
        })
    }
}

impl From<LinkSphere> for LinkSphereRepr {
    fn from(s: LinkSphere) -> Self {
        LinkSphereRepr {
            center: s.center.into(),
            radius: s.radius,
        }
    }
}

/// A revolute serial-chain arm with its collision geometry and limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmModel {
    #[serde(default)]
    pub name: String,
    pub base: Pose,
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub tool: Pose,
    pub limits: JointLimits,
    /// `link_spheres[j]` are the spheres attached to link `j`.
    pub link_spheres: Vec<Vec<LinkSphere>>,
    /// Link pairs excluded from self-collision checks.
    pub self_collision_exclusions: Vec<[usize; 2]>,
}

/// Spheres spread evenly along the segment from the link origin to `end`,
/// endpoints included.
pub fn segment_spheres(start: Vector3<f64>, end: Vector3<f64>, count: usize, radius: f64) -> Vec<LinkSphere> {
    match count {
        0 => vec![],
        1 => vec![LinkSphere {
            center: (start + end) * 0.5,
            radius,
        }],
        k => (0..k)
            .map(|i| {
                let s = i as f64 / (k - 1) as f64;
                LinkSphere {
                    center: start + (end - start) * s,
                    radius,
                }
            })
            .collect(),
    }
}

fn adjacent_exclusions(n: usize, span: usize) -> Vec<[usize; 2]> {
    let mut out = vec![];
    for i in 0..n {
        for j in i + 1..n.min(i + span + 1) {
            out.push([i, j]);
        }
    }
    out
}

impl ArmModel {
    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn sphere_count(&self) -> usize {
        self.link_spheres.iter().map(Vec::len).sum()
    }

    /// Radii of all spheres in link-major order.
    pub fn radii(&self) -> Vec<f64> {
        self.link_spheres.iter().flatten().map(|s| s.radius).collect()
    }

    /// Index range of each link's spheres within a link-major sphere list.
    pub fn link_sphere_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.link_spheres
            .iter()
            .map(|l| {
                let r = start..start + l.len();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn is_excluded(&self, a: usize, b: usize) -> bool {
        let (a, b) = (a.min(b), a.max(b));
        a == b || self.self_collision_exclusions.iter().any(|p| p[0].min(p[1]) == a && p[0].max(p[1]) == b)
    }

    /// Link pairs that are checked for self-collision.
    pub fn self_collision_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.dof();
        let mut out = vec![];
        for a in 0..n {
            for b in a + 1..n {
                if !self.is_excluded(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// World position of the first joint.
    pub fn shoulder(&self) -> Vector3<f64> {
        self.base.transform_point(&self.joints[0].origin.position)
    }

    /// Upper bound on the distance from the first joint to the end-effector.
    pub fn reach(&self) -> f64 {
        self.joints.iter().skip(1).map(|j| j.origin.position.norm()).sum::<f64>() + self.tool.position.norm()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n == 0 {
            return Err(Error::InvalidModel("arm has no joints".into()));
        }
        check_len("limits", n, self.limits.dof())?;
        self.limits.validate()?;
        check_len("link_spheres", n, self.link_spheres.len())?;
        for j in &self.joints {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidModel("joint axis is not unit-norm".into()));
            }
        }
        if self.link_spheres.iter().flatten().any(|s| !(s.radius > 0.0)) {
            return Err(Error::InvalidModel("sphere radius must be > 0".into()));
        }
        for p in &self.self_collision_exclusions {
            if p[0] >= n || p[1] >= n {
                return Err(Error::InvalidModel(format!("exclusion {p:?} references a missing link")));
            }
        }
        for j in 0..n.saturating_sub(1) {
            if !self.is_excluded(j, j + 1) {
                return Err(Error::InvalidModel(format!("adjacent links {j},{} not excluded", j + 1)));
            }
        }
        Ok(())
    }

    /// Planar chain in the base x-y plane: every axis is z, links extend
    /// along local x. Three spheres per link of radius `thickness`.
    pub fn planar(lengths: &[f64], thickness: f64) -> Self {
        let n = lengths.len();
        let joints = (0..n)
            .map(|j| {
                let offset = if j == 0 { 0.0 } else { lengths[j - 1] };
                Joint::new(Pose::from_position(offset, 0.0, 0.0), Vector3::z())
            })
            .collect();
        let link_spheres = lengths
            .iter()
            .map(|&l| segment_spheres(Vector3::zeros(), Vector3::new(l, 0.0, 0.0), 3, thickness))
            .collect();
        ArmModel {
            name: format!("planar{n}"),
            base: Pose::identity(),
            joints,
            tool: Pose::from_position(*lengths.last().unwrap_or(&0.0), 0.0, 0.0),
            limits: JointLimits::uniform(n, (-std::f64::consts::PI, std::f64::consts::PI), 2.0, 10.0),
            link_spheres,
            self_collision_exclusions: adjacent_exclusions(n, 1),
        }
    }

    /// Three-joint spatial arm (yaw, shoulder pitch, elbow pitch) with
    /// 0.85 m reach from a shoulder 0.16 m above the base. Positive pitch
    /// raises the arm.
    pub fn spatial3() -> Self {
        let (shoulder_h, upper, fore, r) = (0.16, 0.425, 0.425, 0.05);
        let pitch = -Vector3::y();
        let joints = vec![
            Joint::new(Pose::from_position(0.0, 0.0, shoulder_h), Vector3::z()),
            Joint::new(Pose::identity(), pitch),
            Joint::new(Pose::from_position(upper, 0.0, 0.0), pitch),
        ];
        let link_spheres = vec![
            segment_spheres(Vector3::new(0.0, 0.0, -shoulder_h), Vector3::zeros(), 3, 0.06),
            segment_spheres(Vector3::zeros(), Vector3::new(upper, 0.0, 0.0), 3, r),
            segment_spheres(Vector3::zeros(), Vector3::new(fore, 0.0, 0.0), 3, r),
        ];
        ArmModel {
            name: "spatial3".into(),
            base: Pose::identity(),
            joints,
            tool: Pose::from_position(fore, 0.0, 0.0),
            limits: JointLimits {
                q_min: vec![-std::f64::consts::PI, -0.2, -2.8],
                q_max: vec![std::f64::consts::PI, 3.0, 2.8],
                v_max: vec![2.0; 3],
                a_max: vec![10.0; 3],
            },
            link_spheres,
            self_collision_exclusions: adjacent_exclusions(3, 1),
        }
    }

    /// Six-joint desk arm loosely shaped like a UR5e: yaw, shoulder, elbow,
    /// then a pitch-roll-pitch wrist; 0.85 m reach from the shoulder.
    pub fn desk6() -> Self {
        let shoulder_h = 0.16;
        let (upper, fore, w1, w2, tool) = (0.40, 0.30, 0.06, 0.04, 0.05);
        let pitch = -Vector3::y();
        let joints = vec![
            Joint::new(Pose::from_position(0.0, 0.0, shoulder_h), Vector3::z()),
            Joint::new(Pose::identity(), pitch),
            Joint::new(Pose::from_position(upper, 0.0, 0.0), pitch),
            Joint::new(Pose::from_position(fore, 0.0, 0.0), pitch),
            Joint::new(Pose::from_position(w1, 0.0, 0.0), Vector3::x()),
            Joint::new(Pose::from_position(w2, 0.0, 0.0), pitch),
        ];
        let x = |l: f64| Vector3::new(l, 0.0, 0.0);
        let link_spheres = vec![
            segment_spheres(Vector3::new(0.0, 0.0, -shoulder_h), Vector3::zeros(), 3, 0.06),
            segment_spheres(Vector3::zeros(), x(upper), 3, 0.05),
            segment_spheres(Vector3::zeros(), x(fore), 3, 0.045),
            segment_spheres(Vector3::zeros(), x(w1), 1, 0.04),
            segment_spheres(Vector3::zeros(), x(w2), 1, 0.04),
            segment_spheres(Vector3::zeros(), x(tool), 2, 0.035),
        ];
        let pi = std::f64::consts::PI;
        ArmModel {
            name: "desk6".into(),
            base: Pose::identity(),
            joints,
            tool: Pose::from_position(tool, 0.0, 0.0),
            limits: JointLimits {
                q_min: vec![-pi, -pi, -2.8, -2.8, -pi, -2.8],
                q_max: vec![pi, pi, 2.8, 2.8, pi, 2.8],
                v_max: vec![2.0; 6],
                a_max: vec![10.0; 6],
            },
            link_spheres,
            // The wrist links are short enough that links two apart overlap.
            self_collision_exclusions: adjacent_exclusions(6, 2),
        }
    }

    /// Same chain mounted at a different base pose.
    pub fn with_base(mut self, base: Pose) -> Self {
        self.base = base;
        self
    }
}

/// World-frame collision spheres of one arm at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereSet {
    pub centers: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
    pub owner: usize,
}

impl SphereSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn with_owner(mut self, owner: usize) -> Self {
        self.owner = owner;
        self
    }
}

/// Link frames and end-effector pose for one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FkResult {
    pub links: Vec<Pose>,
    pub end_effector: Pose,
}

fn check_q(model: &ArmModel, q: &[f64]) -> Result<()> {
    check_len("joint vector", model.dof(), q.len())
}

/// Writes the world frame of every link into `frames` and returns the
/// end-effector frame. `q` must have `model.dof()` entries.
pub(crate) fn link_frames(model: &ArmModel, q: &[f64], frames: &mut Vec<Isometry3<f64>>) -> Isometry3<f64> {
    frames.clear();
    let mut t = model.base.to_isometry();
    for (joint, &angle) in model.joints.iter().zip(q) {
        t = t * joint.origin.to_isometry() * UnitQuaternion::from_axis_angle(&joint.axis, angle);
        frames.push(t);
    }
    t * model.tool.to_isometry()
}

/// Link-major world sphere centers from precomputed link frames.
pub(crate) fn sphere_centers_into(model: &ArmModel, frames: &[Isometry3<f64>], out: &mut Vec<Vector3<f64>>) {
    out.clear();
    for (frame, spheres) in frames.iter().zip(&model.link_spheres) {
        for s in spheres {
            out.push(frame.rotation * s.center + frame.translation.vector);
        }
    }
}

pub fn forward_kinematics(model: &ArmModel, q: &[f64]) -> Result<FkResult> {
    check_q(model, q)?;
    let mut frames = Vec::with_capacity(model.dof());
    let ee = link_frames(model, q, &mut frames);
    Ok(FkResult {
        links: frames.iter().map(Pose::from_isometry).collect(),
        end_effector: Pose::from_isometry(&ee),
    })
}

pub fn compute_spheres(model: &ArmModel, q: &[f64]) -> Result<SphereSet> {
    check_q(model, q)?;
    let mut frames = Vec::with_capacity(model.dof());
    link_frames(model, q, &mut frames);
    let mut centers = Vec::with_capacity(model.sphere_count());
    sphere_centers_into(model, &frames, &mut centers);
    Ok(SphereSet {
        centers,
        radii: model.radii(),
        owner: 0,
    })
}

/// Geometric Jacobian: rows 0..3 linear, rows 3..6 angular velocity of the
/// end-effector per unit joint rate.
pub fn jacobian(model: &ArmModel, q: &[f64]) -> Result<OMatrix<f64, U6, Dyn>> {
    check_q(model, q)?;
    let mut frames = Vec::with_capacity(model.dof());
    let ee = link_frames(model, q, &mut frames);
    let p_ee = ee.translation.vector;
    let mut jac = OMatrix::<f64, U6, Dyn>::zeros(model.dof());
    for (j, (frame, joint)) in frames.iter().zip(&model.joints).enumerate() {
        let axis = frame.rotation * joint.axis.into_inner();
        let lin = axis.cross(&(p_ee - frame.translation.vector));
        jac.fixed_view_mut::<3, 1>(0, j).copy_from(&lin);
        jac.fixed_view_mut::<3, 1>(3, j).copy_from(&axis);
    }
    Ok(jac)
}

/// Yoshikawa manipulability of the linear Jacobian block: the square root of
/// the determinant of its `min(3, n)`-dimensional Gram matrix.
pub fn manipulability(model: &ArmModel, q: &[f64]) -> Result<f64> {
    check_q(model, q)?;
    let mut frames = Vec::with_capacity(model.dof());
    let ee = link_frames(model, q, &mut frames);
    Ok(manipulability_from_frames(model, &frames, &ee.translation.vector))
}

pub(crate) fn manipulability_from_frames(model: &ArmModel, frames: &[Isometry3<f64>], p_ee: &Vector3<f64>) -> f64 {
    let cols = frames.iter().zip(&model.joints).map(|(frame, joint)| {
        let axis = frame.rotation * joint.axis.into_inner();
        axis.cross(&(p_ee - frame.translation.vector))
    });
    let (det, scale) = match model.dof() {
        1 => {
            let c = cols.into_iter().next().unwrap();
            let g = c.norm_squared();
            (g, g)
        }
        2 => {
            let c: Vec<_> = cols.collect();
            let g = Matrix2::new(
                c[0].dot(&c[0]),
                c[0].dot(&c[1]),
                c[1].dot(&c[0]),
                c[1].dot(&c[1]),
            );
            (g.determinant(), (g.trace() / 2.0).powi(2))
        }
        _ => {
            let mut g = Matrix3::zeros();
            for c in cols {
                g += c * c.transpose();
            }
            (g.determinant(), (g.trace() / 3.0).powi(3))
        }
    };
    // Round-off at a singular pose leaves tiny (possibly negative) residue.
    if det <= 1e-12 * scale {
        0.0
    } else {
        det.sqrt()
    }
}

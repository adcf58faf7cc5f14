//! Approximate forward model used for rollouts: a double integrator per
//! joint driven by acceleration commands, with velocity and position
//! clamping.

use crate::error::{check_len, Error, Result};
use crate::kinematics::JointLimits;
use crate::mppi::Policy;

/// Joint positions and velocities at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub t: usize,
}

impl RobotState {
    pub fn at_rest(q: Vec<f64>) -> Self {
        let n = q.len();
        RobotState { q, qd: vec![0.0; n], t: 0 }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.qd).all(|v| v.is_finite())
    }
}

/// `H x n` joint accelerations, row-major by horizon step.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence {
    pub u: Vec<f64>,
    pub dof: usize,
    pub dt: f64,
}

impl ControlSequence {
    pub fn new(u: Vec<f64>, dof: usize, dt: f64) -> Result<Self> {
        if dof == 0 || u.is_empty() || !u.len().is_multiple_of(dof) {
            return Err(Error::InvalidConfig(format!(
                "control buffer of {} values is not a whole number of {dof}-joint rows",
                u.len()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be > 0".into()));
        }
        Ok(ControlSequence { u, dof, dt })
    }

    pub fn horizon(&self) -> usize {
        self.u.len() / self.dof
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.u[h * self.dof..(h + 1) * self.dof]
    }
}

/// Semi-implicit Euler update in place. Inputs are assumed finite and
/// correctly sized.
#[inline]
pub(crate) fn integrate(q: &mut [f64], qd: &mut [f64], u: &[f64], limits: &JointLimits, dt: f64) {
    for j in 0..q.len() {
        let v_max = limits.v_max[j];
        let v = (qd[j] + u[j] * dt).clamp(-v_max, v_max);
        let p = q[j] + v * dt;
        if p > limits.q_max[j] {
            q[j] = limits.q_max[j];
            qd[j] = 0.0;
        } else if p < limits.q_min[j] {
            q[j] = limits.q_min[j];
            qd[j] = 0.0;
        } else {
            q[j] = p;
            qd[j] = v;
        }
    }
}

/// One control period: velocity first, then position; a joint that hits a
/// position limit is stopped there.
pub fn step(state: &RobotState, u: &[f64], limits: &JointLimits, dt: f64) -> Result<RobotState> {
    let n = limits.dof();
    check_len("state.q", n, state.q.len())?;
    check_len("state.qd", n, state.qd.len())?;
    check_len("control", n, u.len())?;
    if !state.is_finite() {
        return Err(Error::NonFinite("state"));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("control"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::NonFinite("dt"));
    }
    let mut next = state.clone();
    integrate(&mut next.q, &mut next.qd, u, limits, dt);
    next.t += 1;
    Ok(next)
}

/// `trajectory[h]` is the state after applying controls `0..=h`.
pub fn rollout(state: &RobotState, seq: &ControlSequence, limits: &JointLimits) -> Result<Vec<RobotState>> {
    check_len("control sequence width", limits.dof(), seq.dof)?;
    let mut out = Vec::with_capacity(seq.horizon());
    let mut cur = state.clone();
    for h in 0..seq.horizon() {
        cur = step(&cur, seq.row(h), limits, seq.dt)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Rollout of the policy mean (zero noise).
pub fn mean_trajectory(policy: &Policy, state: &RobotState, limits: &JointLimits, dt: f64) -> Result<Vec<RobotState>> {
    let seq = ControlSequence::new(policy.mu.clone(), policy.dof, dt)?;
    rollout(state, &seq, limits)
}

//! Sampling-based MPC core: Gaussian control sampling around a per-step
//! mean, parallel rollout evaluation, exponentiated-cost weighting, a
//! moving-average distribution update and the receding-horizon shift.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::terminal_scale;
use crate::dynamics::{integrate, RobotState};
use crate::error::{Error, Result};
use crate::kinematics::{self, ArmModel, JointLimits};

/// Scores one rollout state. Implementations must be pure: rollouts are
/// evaluated concurrently.
pub trait RolloutObjective: Sync {
    type Scratch: Send;

    fn scratch(&self) -> Self::Scratch;

    fn stage_cost(&self, q: &[f64], qd: &[f64], h: usize, scratch: &mut Self::Scratch) -> f64;
}

/// Diagonal Gaussian over an `H x n` acceleration sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub mu: Vec<f64>,
    /// Standard deviations, same layout as `mu`.
    pub sigma: Vec<f64>,
    pub horizon: usize,
    pub dof: usize,
    pub step: usize,
}

impl Policy {
    pub fn new(horizon: usize, dof: usize, sigma_init: f64) -> Self {
        Policy {
            mu: vec![0.0; horizon * dof],
            sigma: vec![sigma_init; horizon * dof],
            horizon,
            dof,
            step: 0,
        }
    }

    pub fn mean_row(&self, h: usize) -> &[f64] {
        &self.mu[h * self.dof..(h + 1) * self.dof]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub rollouts: usize,
    pub iterations: usize,
    /// Softmax temperature.
    pub temperature: f64,
    pub alpha_mu: f64,
    pub alpha_sigma: f64,
    pub sigma_init: f64,
    /// Floor on the standard deviation as a fraction of `sigma_init`.
    pub sigma_min_fraction: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 40,
            rollouts: 400,
            iterations: 5,
            temperature: 1.0,
            alpha_mu: 0.9,
            alpha_sigma: 0.5,
            sigma_init: 4.0,
            sigma_min_fraction: 0.05,
            dt: 1.0 / 60.0,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 2 || self.rollouts < 1 || self.iterations < 1 {
            return Err(Error::InvalidConfig("need horizon >= 2, rollouts >= 1, iterations >= 1".into()));
        }
        if !(self.temperature > 0.0) || !(self.sigma_init > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("temperature, sigma_init and dt must be > 0".into()));
        }
        let unit = |a: f64| a > 0.0 && a <= 1.0;
        if !unit(self.alpha_mu) || !unit(self.alpha_sigma) {
            return Err(Error::InvalidConfig("step sizes must lie in (0, 1]".into()));
        }
        if !(self.sigma_min_fraction > 0.0 && self.sigma_min_fraction <= 1.0) {
            return Err(Error::InvalidConfig("sigma_min_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_init * self.sigma_min_fraction
    }
}

/// `n` sequences `mu + sigma * z`, flattened as `n x H x dof`. Sequence 0
/// is the mean itself so the incumbent plan is always evaluated.
pub fn sample_controls<R: rand::Rng>(policy: &Policy, n: usize, rng: &mut R) -> Vec<f64> {
    let len = policy.mu.len();
    let mut out = Vec::with_capacity(n * len);
    if n == 0 {
        return out;
    }
    out.extend_from_slice(&policy.mu);
    for _ in 1..n {
        for (m, s) in policy.mu.iter().zip(&policy.sigma) {
            let z: f64 = StandardNormal.sample(rng);
            out.push(m + s * z);
        }
    }
    out
}

/// Softmax of `-totals / temperature`, shifted by the minimum cost.
/// Non-finite costs get zero weight; if every cost is non-finite the
/// weights fall back to uniform.
pub fn compute_weights(totals: &[f64], temperature: f64) -> Vec<f64> {
    let best = totals.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        log::warn!("all {} rollout costs are non-finite; using uniform weights", totals.len());
        return vec![1.0 / totals.len() as f64; totals.len()];
    }
    let mut w: Vec<f64> = totals
        .iter()
        .map(|c| if c.is_finite() { (-(c - best) / temperature).exp() } else { 0.0 })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= sum);
    w
}

/// Weighted mean and per-coordinate standard deviation of the samples,
/// the deviation floored at `sigma_min`.
pub fn weighted_stats(controls: &[f64], weights: &[f64], len: usize, sigma_min: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; len];
    for (u, w) in controls.chunks_exact(len).zip(weights) {
        if *w == 0.0 {
            continue;
        }
        for (m, x) in mu.iter_mut().zip(u) {
            *m += w * x;
        }
    }
    let mut var = vec![0.0; len];
    for (u, w) in controls.chunks_exact(len).zip(weights) {
        if *w == 0.0 {
            continue;
        }
        for ((v, x), m) in var.iter_mut().zip(u).zip(&mu) {
            let d = x - m;
            *v += w * d * d;
        }
    }
    let sigma = var.into_iter().map(|v| v.sqrt().max(sigma_min)).collect();
    (mu, sigma)
}

/// Exponential moving average of mean and standard deviation.
pub fn update_distribution(policy: &Policy, mu_tilde: &[f64], sigma_tilde: &[f64], alpha_mu: f64, alpha_sigma: f64) -> Policy {
    let mut next = policy.clone();
    for (m, t) in next.mu.iter_mut().zip(mu_tilde) {
        *m = (1.0 - alpha_mu) * *m + alpha_mu * t;
    }
    for (s, t) in next.sigma.iter_mut().zip(sigma_tilde) {
        *s = (1.0 - alpha_sigma) * *s + alpha_sigma * t;
    }
    next
}

/// Drops the first step, replicates the new last step into the tail, and
/// resets the tail deviation to at least `sigma_init`.
pub fn shift(policy: &Policy, sigma_init: f64) -> Policy {
    let mut next = policy.clone();
    let (n, len) = (policy.dof, policy.mu.len());
    if policy.horizon >= 2 {
        next.mu.copy_within(n..len, 0);
        next.sigma.copy_within(n..len, 0);
        next.mu.copy_within(len - 2 * n..len - n, len - n);
        next.sigma.copy_within(len - 2 * n..len - n, len - n);
        for s in &mut next.sigma[len - n..] {
            *s = s.max(sigma_init);
        }
    }
    next.step += 1;
    next
}

/// Sampled sequences with their per-step and total costs.
#[derive(Clone, Debug)]
pub struct RolloutBatch {
    /// `N x H x dof`
    pub controls: Vec<f64>,
    /// `N x H`
    pub costs: Vec<f64>,
    pub totals: Vec<f64>,
}

impl RolloutBatch {
    /// Lowest total; ties go to the lowest index.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, c) in self.totals.iter().enumerate() {
            if *c < self.totals[best] || (self.totals[best].is_nan() && !c.is_nan()) {
                best = i;
            }
        }
        best
    }
}

fn total_of(stage: &[f64], discount: f64, scale: f64) -> f64 {
    let (last, head) = stage.split_last().expect("horizon >= 1");
    crate::cost::trajectory_cost(head, scale * last, discount)
}

/// Rolls every sequence out from `state` and scores it.
pub fn evaluate_rollouts<O: RolloutObjective>(
    state: &RobotState,
    controls: Vec<f64>,
    horizon: usize,
    limits: &JointLimits,
    dt: f64,
    discount: f64,
    objective: &O,
) -> RolloutBatch {
    let dof = limits.dof();
    let len = horizon * dof;
    let n = controls.len() / len;
    let scale = terminal_scale(discount, horizon);
    let mut costs = vec![0.0; n * horizon];
    let mut totals = vec![0.0; n];
    controls
        .par_chunks(len)
        .zip(costs.par_chunks_mut(horizon))
        .zip(totals.par_iter_mut())
        .for_each_init(
            || (objective.scratch(), state.q.clone(), state.qd.clone()),
            |(scratch, q, qd), ((u, stage), total)| {
                q.copy_from_slice(&state.q);
                qd.copy_from_slice(&state.qd);
                for h in 0..horizon {
                    integrate(q, qd, &u[h * dof..(h + 1) * dof], limits, dt);
                    let c = objective.stage_cost(q, qd, h, scratch);
                    stage[h] = if c.is_nan() { f64::INFINITY } else { c };
                }
                *total = total_of(stage, discount, scale);
            },
        );
    RolloutBatch { controls, costs, totals }
}

/// Result of one control step.
#[derive(Clone, Debug)]
pub struct PlanOutput {
    /// First control of the lowest-cost sampled sequence (zero when the
    /// planner refused to run).
    pub action: Vec<f64>,
    pub best_cost: f64,
    /// Rollout of the updated policy mean.
    pub mean_states: Vec<RobotState>,
    /// Total cost of the policy mean before and after each iteration.
    pub mean_costs: Vec<f64>,
    pub ok: bool,
}

/// One agent's planner: owns its policy and random stream.
#[derive(Clone, Debug)]
pub struct Planner {
    pub config: PlannerConfig,
    pub limits: JointLimits,
    pub policy: Policy,
    pub discount: f64,
    rng: ChaCha8Rng,
}

impl Planner {
    pub fn new(config: PlannerConfig, limits: JointLimits, discount: f64) -> Result<Self> {
        config.validate()?;
        limits.validate()?;
        let policy = Policy::new(config.horizon, limits.dof(), config.sigma_init);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Planner {
            config,
            limits,
            policy,
            discount,
            rng,
        })
    }

    pub fn dof(&self) -> usize {
        self.limits.dof()
    }

    /// Receding-horizon shift of the current policy.
    pub fn shift(&mut self) {
        self.policy = shift(&self.policy, self.config.sigma_init);
    }

    fn clamp_to_limits(&self, controls: &mut [f64]) {
        let n = self.dof();
        for (i, u) in controls.iter_mut().enumerate() {
            let a = self.limits.a_max[i % n];
            *u = u.clamp(-a, a);
        }
    }

    fn mean_rollout(&self, state: &RobotState) -> Vec<RobotState> {
        let n = self.dof();
        let mut cur = state.clone();
        (0..self.config.horizon)
            .map(|h| {
                integrate(&mut cur.q, &mut cur.qd, &self.policy.mu[h * n..(h + 1) * n], &self.limits, self.config.dt);
                cur.t += 1;
                cur.clone()
            })
            .collect()
    }

    /// Cost of the current policy mean.
    pub fn mean_cost<O: RolloutObjective>(&self, state: &RobotState, objective: &O) -> f64 {
        let batch = evaluate_rollouts(
            state,
            self.policy.mu.clone(),
            self.config.horizon,
            &self.limits,
            self.config.dt,
            self.discount,
            objective,
        );
        batch.totals[0]
    }

    /// `iterations` rounds of sample, roll out, score and update; returns
    /// the first action of the best sequence from the final round.
    pub fn plan_step<O: RolloutObjective>(&mut self, state: &RobotState, objective: &O) -> PlanOutput {
        let n = self.dof();
        if state.dof() != n || state.qd.len() != n || !state.is_finite() {
            log::warn!("refusing to plan from an invalid state; commanding zero acceleration");
            return PlanOutput {
                action: vec![0.0; n],
                best_cost: f64::INFINITY,
                mean_states: vec![],
                mean_costs: vec![],
                ok: false,
            };
        }
        let cfg = self.config.clone();
        let len = cfg.horizon * n;
        let mut last = None;
        let mut mean_costs = Vec::with_capacity(cfg.iterations + 1);
        for _ in 0..cfg.iterations {
            let mut controls = sample_controls(&self.policy, cfg.rollouts, &mut self.rng);
            self.clamp_to_limits(&mut controls);
            let batch = evaluate_rollouts(state, controls, cfg.horizon, &self.limits, cfg.dt, self.discount, objective);
            // Sample 0 is the unperturbed mean.
            mean_costs.push(batch.totals[0]);
            let w = compute_weights(&batch.totals, cfg.temperature);
            let (mu, sigma) = weighted_stats(&batch.controls, &w, len, cfg.sigma_min());
            self.policy = update_distribution(&self.policy, &mu, &sigma, cfg.alpha_mu, cfg.alpha_sigma);
            last = Some(batch);
        }
        mean_costs.push(self.mean_cost(state, objective));
        let batch = last.expect("iterations >= 1");
        let best = batch.best();
        let action = batch.controls[best * len..best * len + n].to_vec();
        PlanOutput {
            action,
            best_cost: batch.totals[best],
            mean_states: self.mean_rollout(state),
            mean_costs,
            ok: true,
        }
    }
}

/// World-frame sphere centers along a state trajectory.
pub fn sphere_trajectory(model: &ArmModel, states: &[RobotState]) -> Vec<Vec<Vector3<f64>>> {
    let mut frames = Vec::with_capacity(model.dof());
    states
        .iter()
        .map(|s| {
            kinematics::link_frames(model, &s.q, &mut frames);
            let mut centers = Vec::with_capacity(model.sphere_count());
            kinematics::sphere_centers_into(model, &frames, &mut centers);
            centers
        })
        .collect()
}

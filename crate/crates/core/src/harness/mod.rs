//! Trial driver for the four algorithm modes, metrics, and paired reporting.

mod metrics;
mod sweep;

pub use metrics::{
    collision_step_count, control_frequency, following_error, mean_sd, paired_differences, Metrics, PairedRow,
    TrialRecord, SCHEMA_VERSION,
};
pub use sweep::{load_records, report, run_sweep, trial_path, write_tables, SweepOptions};

use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::coordination::{agent_loop, Agent, AgentEnv, BoardEntry, IntentionBoard, Others, StepOutcome};
use crate::cost::{ArmCost, CostWeights, CoupledCost, GoalSpec};
use crate::dynamics::{step, RobotState};
use crate::error::{Error, Result};
use crate::kinematics::{compute_spheres, forward_kinematics, JointLimits, SphereSet};
use crate::mppi::{Planner, PlannerConfig};
use crate::world::{signed_distance, GoalEvent, Obstacle, Scenario, TaskKind, TaskState, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlgoKind {
    /// Shared intents with goal-distance prioritization.
    #[serde(rename = "mrs")]
    Mrs,
    /// Shared intents, prioritization off.
    #[serde(rename = "mrs-noprio")]
    MrsNoPrio,
    /// Other arms seen as static spheres at their current pose.
    #[serde(rename = "sd")]
    Sd,
    /// One planner over all arms' joints.
    #[serde(rename = "sc")]
    Sc,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 4] = [AlgoKind::Mrs, AlgoKind::MrsNoPrio, AlgoKind::Sd, AlgoKind::Sc];

    pub fn name(&self) -> &'static str {
        match self {
            AlgoKind::Mrs => "mrs",
            AlgoKind::MrsNoPrio => "mrs-noprio",
            AlgoKind::Sd => "sd",
            AlgoKind::Sc => "sc",
        }
    }
}

impl std::fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgoKind::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase().replace('_', "-"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algorithm `{s}` (expected mrs, mrs-noprio, sd or sc)")))
    }
}

/// Algorithm plus its sampling budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgoMode {
    pub kind: AlgoKind,
    pub rollouts: usize,
    pub iterations: usize,
    pub trust: f64,
}

impl AlgoMode {
    pub fn new(kind: AlgoKind, rollouts: usize, iterations: usize) -> Self {
        AlgoMode {
            kind,
            rollouts,
            iterations,
            trust: 3.0,
        }
    }

    pub fn with_trust(mut self, trust: f64) -> Self {
        self.trust = trust;
        self
    }

    /// Trust actually applied; always 0 without prioritization.
    pub fn effective_trust(&self) -> f64 {
        match self.kind {
            AlgoKind::MrsNoPrio => 0.0,
            _ => self.trust,
        }
    }

    fn shares_intents(&self) -> bool {
        matches!(self.kind, AlgoKind::Mrs | AlgoKind::MrsNoPrio)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub planner: PlannerConfig,
    pub weights: CostWeights,
    /// Contact when signed distance falls below this (m).
    pub contact_threshold: f64,
    /// Each agent on its own thread; results are flagged nondeterministic.
    pub asynchronous: bool,
    /// Lockstep agents plan on every `replan_every`-th tick and follow
    /// their mean plan open loop in between.
    pub replan_every: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig {
            planner: PlannerConfig::default(),
            weights: CostWeights::default(),
            contact_threshold: 0.0,
            asynchronous: false,
            replan_every: 1,
        }
    }
}

/// One row of `log.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    pub ee: Vec<Vector3<f64>>,
    pub goal: Vec<Vector3<f64>>,
    pub contact: bool,
    /// Mean per-arm planning time of this step.
    pub plan_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrialResult {
    pub metrics: Metrics,
    pub log: Vec<StepLog>,
    pub events: Vec<GoalEvent>,
}

/// Seed of arm `arm`'s planner in a trial.
pub fn planner_seed(scenario_seed: u64, base: u64, arm: usize) -> u64 {
    scenario_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ base ^ (arm as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// True when any arm touches another arm or an obstacle.
pub fn in_contact(spheres: &[SphereSet], obstacles: &[Obstacle], threshold: f64) -> bool {
    for (i, a) in spheres.iter().enumerate() {
        for (c, r) in a.centers.iter().zip(&a.radii) {
            if obstacles.iter().any(|o| signed_distance(c, *r, o) < threshold) {
                return true;
            }
        }
        for b in &spheres[i + 1..] {
            for (ca, ra) in a.centers.iter().zip(&a.radii) {
                for (cb, rb) in b.centers.iter().zip(&b.radii) {
                    if (ca - cb).norm() - (ra + rb) < threshold {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Contact flags for prescribed joint trajectories (`[step][arm]`), with
/// obstacles advanced as in a trial.
pub fn replay_contacts(scenario: &Scenario, joints: &[Vec<Vec<f64>>], threshold: f64) -> Result<Vec<bool>> {
    let mut world = World::new(scenario);
    joints
        .iter()
        .map(|qs| {
            world.advance(scenario.dt);
            let spheres = arm_spheres(scenario, qs)?;
            Ok(in_contact(&spheres, &world.obstacles, threshold))
        })
        .collect()
}

fn arm_spheres(scenario: &Scenario, qs: &[Vec<f64>]) -> Result<Vec<SphereSet>> {
    scenario
        .arms
        .iter()
        .zip(qs)
        .enumerate()
        .map(|(i, (a, q))| Ok(compute_spheres(&a.model, q)?.with_owner(i)))
        .collect()
}

fn end_effectors(scenario: &Scenario, states: &[RobotState]) -> Result<Vec<Vector3<f64>>> {
    scenario
        .arms
        .iter()
        .zip(states)
        .map(|(a, s)| Ok(forward_kinematics(&a.model, &s.q)?.end_effector.position))
        .collect()
}

/// Simulation state shared by all modes.
struct Sim<'a> {
    scenario: &'a Scenario,
    cfg: &'a TrialConfig,
    states: Vec<RobotState>,
    world: World,
    task: TaskState,
    log: Vec<StepLog>,
    contacts: Vec<bool>,
    ee_hist: Vec<Vec<Vector3<f64>>>,
    goal_hist: Vec<Vec<Vector3<f64>>>,
    aborted: bool,
    /// Every arm has completed its task; the trial ends early.
    finished: bool,
}

impl<'a> Sim<'a> {
    fn new(scenario: &'a Scenario, cfg: &'a TrialConfig) -> Self {
        Sim {
            scenario,
            cfg,
            states: scenario.arms.iter().map(|a| RobotState::at_rest(a.q0.clone())).collect(),
            world: World::new(scenario),
            task: TaskState::new(scenario),
            log: Vec::with_capacity(scenario.t_max),
            contacts: Vec::with_capacity(scenario.t_max),
            ee_hist: vec![],
            goal_hist: vec![],
            aborted: false,
            finished: false,
        }
    }

    fn goals(&self) -> Vec<GoalSpec> {
        (0..self.states.len()).map(|i| self.task.goal(i)).collect()
    }

    /// Applies `actions`, updates goals and records the step. Returns
    /// false once the trial has to stop.
    fn finish_step(&mut self, t: usize, actions: &[Vec<f64>], plan_ms: f64) -> bool {
        let dt = self.scenario.dt;
        for (i, a) in actions.iter().enumerate() {
            match step(&self.states[i], a, &self.scenario.arms[i].model.limits, dt) {
                Ok(s) => self.states[i] = s,
                Err(e) => {
                    log::error!("arm {i} at step {t}: {e}; aborting trial");
                    self.aborted = true;
                    return false;
                }
            }
        }
        self.record(t, plan_ms)
    }

    fn record(&mut self, t: usize, plan_ms: f64) -> bool {
        let Ok(ee) = end_effectors(self.scenario, &self.states) else {
            self.aborted = true;
            return false;
        };
        let goals_before = self.task.goals.clone();
        self.task.update(self.scenario, &ee, t);
        let qs: Vec<Vec<f64>> = self.states.iter().map(|s| s.q.clone()).collect();
        let contact = match arm_spheres(self.scenario, &qs) {
            Ok(s) => in_contact(&s, &self.world.obstacles, self.cfg.contact_threshold),
            Err(_) => {
                self.aborted = true;
                return false;
            }
        };
        self.contacts.push(contact);
        self.ee_hist.push(ee.clone());
        self.goal_hist.push(goals_before.clone());
        self.log.push(StepLog {
            step: t,
            q: qs,
            qd: self.states.iter().map(|s| s.qd.clone()).collect(),
            ee,
            goal: goals_before,
            contact,
            plan_ms,
        });
        self.finished = self.task.finished(self.scenario);
        !self.finished
    }

    fn into_result(self, mode: &AlgoMode, times: Vec<Vec<Duration>>, reads: usize, staleness: usize) -> TrialResult {
        let s = self.scenario;
        let per_arm: Vec<f64> = times.iter().map(|t| control_frequency(t)).collect();
        let freq = per_arm.iter().sum::<f64>() / per_arm.len().max(1) as f64;
        let reached = match s.task {
            TaskKind::BinLoading | TaskKind::Following => 0,
            _ => self.task.total_score(),
        };
        let dropped = if s.task == TaskKind::BinLoading { self.task.total_score() } else { 0 };
        let follow = (s.task == TaskKind::Following).then(|| following_error(&self.ee_hist, &self.goal_hist));
        let task_score = follow.unwrap_or(self.task.total_score() as f64);
        let metrics = Metrics {
            schema_version: SCHEMA_VERSION,
            task: s.task.name().into(),
            level: s.level,
            seed: s.seed,
            algo: mode.kind.name().into(),
            rollouts: mode.rollouts,
            iterations: mode.iterations,
            trust: mode.effective_trust(),
            collision_steps: collision_step_count(&self.contacts),
            task_score,
            goals_reached: reached,
            objects_dropped: dropped,
            following_error: follow,
            control_frequency_hz: freq,
            per_arm_frequency_hz: per_arm,
            first_reach: (0..s.arms.len()).map(|i| self.task.first_reach(i)).collect(),
            t_max: s.t_max,
            steps_run: self.log.len(),
            aborted: self.aborted,
            nondeterministic: self.cfg.asynchronous,
            trajectory_reads: reads,
            max_staleness: staleness,
        };
        TrialResult {
            metrics,
            log: self.log,
            events: self.task.events,
        }
    }
}

fn mode_config(cfg: &TrialConfig, mode: &AlgoMode) -> (PlannerConfig, CostWeights) {
    let mut planner = cfg.planner.clone();
    planner.rollouts = mode.rollouts;
    planner.iterations = mode.iterations;
    let mut weights = cfg.weights.clone();
    weights.trust = mode.effective_trust();
    (planner, weights)
}

/// Runs one trial of `mode` on `scenario`.
pub fn run_trial(scenario: &Scenario, mode: &AlgoMode, cfg: &TrialConfig) -> Result<TrialResult> {
    scenario.validate()?;
    cfg.weights.validate()?;
    if cfg.replan_every == 0 {
        return Err(Error::InvalidConfig("replan_every must be >= 1".into()));
    }
    if mode.rollouts == 0 || mode.iterations == 0 {
        return Err(Error::InvalidConfig("rollouts and iterations must be >= 1".into()));
    }
    match (mode.kind, cfg.asynchronous) {
        (AlgoKind::Sc, false) => run_coupled(scenario, mode, cfg),
        (_, false) => run_decentralized(scenario, mode, cfg),
        (AlgoKind::Mrs | AlgoKind::MrsNoPrio, true) => run_async(scenario, mode, cfg),
        (kind, true) => Err(Error::InvalidConfig(format!("asynchronous mode needs a board-sharing algorithm, not {kind}"))),
    }
}

fn make_agents(scenario: &Scenario, mode: &AlgoMode, cfg: &TrialConfig) -> Result<Vec<Agent>> {
    let (planner, weights) = mode_config(cfg, mode);
    scenario
        .arms
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut pc = planner.clone();
            pc.seed = planner_seed(scenario.seed, planner.seed, i);
            pc.dt = scenario.dt;
            Agent::new(i, a.model.clone(), pc, weights.clone())
        })
        .collect()
}

fn run_decentralized(scenario: &Scenario, mode: &AlgoMode, cfg: &TrialConfig) -> Result<TrialResult> {
    let mut agents = make_agents(scenario, mode, cfg)?;
    let n = agents.len();
    let board = IntentionBoard::new(n, agents[0].planner.config.horizon);
    for a in &agents {
        board.register_radii(a.id, a.model.radii())?;
    }
    let sharing = mode.shares_intents();
    let trust = mode.effective_trust();
    let mut sim = Sim::new(scenario, cfg);
    let mut times = vec![Vec::with_capacity(scenario.t_max); n];
    let mut staleness = 0;
    for t in 0..scenario.t_max {
        sim.world.advance(scenario.dt);
        let obstacles = sim.world.obstacles.clone();
        let goals = sim.goals();
        // Every agent reads before anyone publishes this tick.
        let entries: Vec<Vec<Arc<BoardEntry>>> =
            (0..n).map(|i| if sharing { board.read_intents(i) } else { vec![] }).collect();
        // Without intents, the other arms' current spheres become static obstacles.
        let arm_obstacles: Vec<Vec<Obstacle>> = if sharing {
            vec![]
        } else {
            let qs: Vec<Vec<f64>> = sim.states.iter().map(|s| s.q.clone()).collect();
            arm_spheres(scenario, &qs)?
                .into_iter()
                .map(|s| s.centers.iter().zip(&s.radii).map(|(c, r)| Obstacle::sphere(*c, *r)).collect())
                .collect()
        };
        let mut actions = Vec::with_capacity(n);
        let mut published = Vec::with_capacity(n);
        let mut step_ms = 0.0;
        if t % cfg.replan_every != 0 {
            for agent in agents.iter_mut() {
                agent.planner.shift();
                actions.push(agent.planner.policy.mean_row(0).to_vec());
            }
            if !sim.finish_step(t, &actions, 0.0) {
                break;
            }
            continue;
        }
        for (i, agent) in agents.iter_mut().enumerate() {
            let mut seen = obstacles.clone();
            let others = if sharing {
                Others::Intents {
                    entries: &entries[i],
                    board: &board,
                    trust,
                }
            } else {
                for (j, o) in arm_obstacles.iter().enumerate() {
                    if j != i {
                        seen.extend_from_slice(o);
                    }
                }
                Others::Ignore
            };
            let out = agent.control_step(&sim.states[i], &goals[i], &seen, others, sharing, t);
            staleness = staleness.max(out.max_staleness);
            times[i].push(out.plan_time);
            step_ms += out.plan_time.as_secs_f64() * 1e3 / n as f64;
            published.extend(out.intent);
            actions.push(out.action);
        }
        for e in published {
            board.publish(e)?;
        }
        if !sim.finish_step(t, &actions, step_ms) {
            break;
        }
    }
    let reads = board.trajectory_reads();
    Ok(sim.into_result(mode, times, reads, staleness))
}

fn run_coupled(scenario: &Scenario, mode: &AlgoMode, cfg: &TrialConfig) -> Result<TrialResult> {
    let (mut pc, weights) = mode_config(cfg, mode);
    pc.seed = planner_seed(scenario.seed, pc.seed, 0);
    pc.dt = scenario.dt;
    let limits = JointLimits::concat(scenario.arms.iter().map(|a| &a.model.limits));
    let dofs: Vec<usize> = scenario.arms.iter().map(|a| a.model.dof()).collect();
    let mut planner = Planner::new(pc, limits, weights.discount)?;
    let mut sim = Sim::new(scenario, cfg);
    let mut times = vec![Vec::with_capacity(scenario.t_max)];
    for t in 0..scenario.t_max {
        sim.world.advance(scenario.dt);
        if t % cfg.replan_every != 0 {
            planner.shift();
            let mean = planner.policy.mean_row(0);
            let mut actions = Vec::with_capacity(dofs.len());
            let mut at = 0;
            for d in &dofs {
                actions.push(mean[at..at + d].to_vec());
                at += d;
            }
            if !sim.finish_step(t, &actions, 0.0) {
                break;
            }
            continue;
        }
        let obstacles = sim.world.obstacles.clone();
        let goals = sim.goals();
        let joint = RobotState {
            q: sim.states.iter().flat_map(|s| s.q.iter().copied()).collect(),
            qd: sim.states.iter().flat_map(|s| s.qd.iter().copied()).collect(),
            t,
        };
        let start = Instant::now();
        let cost = CoupledCost::new(
            scenario
                .arms
                .iter()
                .zip(&goals)
                .map(|(a, g)| {
                    ArmCost::new(&a.model, *g, &obstacles, vec![], &weights, planner.config.horizon, scenario.dt)
                })
                .collect(),
        );
        planner.shift();
        let out = planner.plan_step(&joint, &cost);
        let elapsed = start.elapsed();
        times[0].push(elapsed);
        let mut actions = Vec::with_capacity(dofs.len());
        let mut at = 0;
        for d in &dofs {
            actions.push(out.action[at..at + d].to_vec());
            at += d;
        }
        if !sim.finish_step(t, &actions, elapsed.as_secs_f64() * 1e3) {
            break;
        }
    }
    Ok(sim.into_result(mode, times, 0, 0))
}

struct Shared<'a> {
    sim: Sim<'a>,
    /// Steps completed per arm.
    done: Vec<usize>,
    tick: usize,
    tick_ms: Vec<f64>,
}

struct AsyncEnv<'s, 'a> {
    arm: usize,
    shared: &'s Mutex<Shared<'a>>,
}

impl AgentEnv for AsyncEnv<'_, '_> {
    fn sense(&mut self, _t: usize) -> Option<RobotState> {
        let s = self.shared.lock().unwrap();
        (!s.sim.aborted && !s.sim.finished).then(|| s.sim.states[self.arm].clone())
    }

    fn goal(&self) -> GoalSpec {
        self.shared.lock().unwrap().sim.task.goal(self.arm)
    }

    fn obstacles(&self) -> Vec<Obstacle> {
        self.shared.lock().unwrap().sim.world.obstacles.clone()
    }

    fn actuate(&mut self, action: &[f64], outcome: &StepOutcome) {
        let mut guard = self.shared.lock().unwrap();
        let s = &mut *guard;
        let sc = s.sim.scenario;
        match step(&s.sim.states[self.arm], action, &sc.arms[self.arm].model.limits, sc.dt) {
            Ok(next) => s.sim.states[self.arm] = next,
            Err(_) => {
                s.sim.aborted = true;
                return;
            }
        }
        let t = s.done[self.arm];
        if s.tick_ms.len() <= t {
            s.tick_ms.resize(t + 1, 0.0);
        }
        s.tick_ms[t] += outcome.plan_time.as_secs_f64() * 1e3 / s.done.len() as f64;
        s.done[self.arm] += 1;
        // The world ticks once every arm has finished the step.
        while s.done.iter().all(|d| *d > s.tick) && !s.sim.aborted && !s.sim.finished {
            let tick = s.tick;
            s.sim.record(tick, s.tick_ms[tick]);
            s.sim.world.advance(sc.dt);
            s.tick += 1;
        }
    }
}

fn run_async(scenario: &Scenario, mode: &AlgoMode, cfg: &TrialConfig) -> Result<TrialResult> {
    let agents = make_agents(scenario, mode, cfg)?;
    let n = agents.len();
    let board = IntentionBoard::new(n, agents[0].planner.config.horizon);
    let mut sim = Sim::new(scenario, cfg);
    sim.world.advance(scenario.dt);
    let shared = Mutex::new(Shared {
        sim,
        done: vec![0; n],
        tick: 0,
        tick_ms: vec![],
    });
    let trust = mode.effective_trust();
    let logs: Vec<Result<Vec<StepOutcome>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = agents
            .into_iter()
            .map(|mut agent| {
                let (board, shared) = (&board, &shared);
                scope.spawn(move || {
                    let mut env = AsyncEnv { arm: agent.id, shared };
                    agent_loop(&mut agent, board, &mut env, trust, scenario.t_max)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect()
    });
    let mut times = Vec::with_capacity(n);
    let mut staleness = 0;
    for log in logs {
        let log = log?;
        staleness = log.iter().map(|o| o.max_staleness).fold(staleness, usize::max);
        times.push(log.iter().map(|o| o.plan_time).collect());
    }
    let reads = board.trajectory_reads();
    let shared = shared.into_inner().unwrap();
    Ok(shared.sim.into_result(mode, times, reads, staleness))
}

/// Writes `metrics.json`.
pub fn write_metrics(path: impl AsRef<Path>, metrics: &Metrics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)? + "\n")?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Metrics> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Header of `log.csv` for `scenario`.
pub fn log_header(scenario: &Scenario) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    for (i, a) in scenario.arms.iter().enumerate() {
        let n = a.model.dof();
        h.extend((0..n).map(|j| format!("q{i}_{j}")));
        h.extend((0..n).map(|j| format!("qd{i}_{j}")));
        h.extend(["x", "y", "z"].map(|c| format!("ee{i}_{c}")));
        h.extend(["x", "y", "z"].map(|c| format!("goal{i}_{c}")));
    }
    h.push("contact".into());
    h.push("plan_ms".into());
    h
}

/// Writes the per-step log; floats use the shortest round-trip form.
pub fn write_log_csv(path: impl AsRef<Path>, scenario: &Scenario, log: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(log_header(scenario))?;
    for row in log {
        let mut rec = vec![row.step.to_string()];
        for i in 0..row.q.len() {
            rec.extend(row.q[i].iter().map(f64::to_string));
            rec.extend(row.qd[i].iter().map(f64::to_string));
            rec.extend(row.ee[i].iter().map(f64::to_string));
            rec.extend(row.goal[i].iter().map(f64::to_string));
        }
        rec.push(u8::from(row.contact).to_string());
        rec.push(format!("{:.3}", row.plan_ms));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

//! Intention board shared between arm agents, its line-oriented wire codec,
//! and the per-agent control loop.

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};
use std::time::{Duration, Instant};

use nalgebra::Vector3;
use serde_json::{json, Value};

use crate::cost::{pose_cost, priority_factor, ArmCost, CostWeights, GoalSpec, Intent};
use crate::dynamics::RobotState;
use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, ArmModel};
use crate::mppi::{sphere_trajectory, Planner, PlannerConfig};
use crate::world::Obstacle;

/// One arm's published plan: sphere centers along the mean trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct BoardEntry {
    pub arm: usize,
    /// `H` steps of sphere centers; radii live on the board.
    pub trajectory: Vec<Vec<Vector3<f64>>>,
    pub goal_distance: f64,
    pub stamp: usize,
}

/// Latest intent per arm plus the registered sphere radii.
#[derive(Debug)]
pub struct IntentionBoard {
    horizon: usize,
    slots: Vec<RwLock<Option<Arc<BoardEntry>>>>,
    radii: Vec<OnceLock<Vec<f64>>>,
    trajectory_reads: AtomicUsize,
}

impl IntentionBoard {
    pub fn new(arms: usize, horizon: usize) -> Self {
        IntentionBoard {
            horizon,
            slots: (0..arms).map(|_| RwLock::new(None)).collect(),
            radii: (0..arms).map(|_| OnceLock::new()).collect(),
            trajectory_reads: AtomicUsize::new(0),
        }
    }

    pub fn arms(&self) -> usize {
        self.slots.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Registering the same list twice is a no-op; a different list fails.
    pub fn register_radii(&self, arm: usize, radii: Vec<f64>) -> Result<()> {
        let cell = self.radii.get(arm).ok_or(Error::UnknownArm(arm))?;
        if cell.get_or_init(|| radii.clone()) != &radii {
            return Err(Error::RadiiConflict { arm });
        }
        Ok(())
    }

    pub fn radii(&self, arm: usize) -> Option<&[f64]> {
        self.radii.get(arm)?.get().map(Vec::as_slice)
    }

    /// Replaces the arm's slot. Returns `Ok(false)` when the stamp is not
    /// newer than the stored one.
    pub fn publish(&self, entry: BoardEntry) -> Result<bool> {
        let slot = self.slots.get(entry.arm).ok_or(Error::UnknownArm(entry.arm))?;
        if entry.trajectory.len() != self.horizon {
            return Err(Error::Dimension {
                what: "intent trajectory",
                expected: self.horizon,
                got: entry.trajectory.len(),
            });
        }
        if !(entry.goal_distance >= 0.0) {
            return Err(Error::NonFinite("goal distance"));
        }
        let mut guard = slot.write().unwrap_or_else(|e| e.into_inner());
        if let Some(old) = guard.as_ref() {
            if entry.stamp <= old.stamp {
                log::debug!("arm {}: ignoring stale intent stamp {} <= {}", entry.arm, entry.stamp, old.stamp);
                return Ok(false);
            }
        }
        *guard = Some(Arc::new(entry));
        Ok(true)
    }

    /// Latest entries of every other arm; arms that never published are
    /// omitted.
    pub fn read_intents(&self, self_id: usize) -> Vec<Arc<BoardEntry>> {
        let out: Vec<_> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self_id)
            .filter_map(|(_, s)| s.read().unwrap_or_else(|e| e.into_inner()).clone())
            .collect();
        self.trajectory_reads.fetch_add(out.len(), Ordering::Relaxed);
        out
    }

    pub fn latest(&self, arm: usize) -> Option<Arc<BoardEntry>> {
        self.slots.get(arm)?.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Number of trajectories handed out by `read_intents` so far.
    pub fn trajectory_reads(&self) -> usize {
        self.trajectory_reads.load(Ordering::Relaxed)
    }
}

/// One JSON line (without the trailing newline).
pub fn encode_entry(entry: &BoardEntry) -> String {
    let traj: Vec<Vec<[f64; 3]>> = entry
        .trajectory
        .iter()
        .map(|step| step.iter().map(|c| [c.x, c.y, c.z]).collect())
        .collect();
    json!({ "arm": entry.arm, "stamp": entry.stamp, "d": entry.goal_distance, "traj": traj }).to_string()
}

fn field_err(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Decode { field, msg: msg.into() }
}

/// Parses one line, checking that the trajectory has `horizon` steps.
/// Unknown fields are ignored.
pub fn decode_entry(line: &str, horizon: usize) -> Result<BoardEntry> {
    let v: Value = serde_json::from_str(line.trim()).map_err(|e| field_err("line", e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| field_err("line", "not a JSON object"))?;
    let uint = |k: &'static str| {
        obj.get(k)
            .and_then(Value::as_u64)
            .map(|x| x as usize)
            .ok_or_else(|| field_err(k, "missing or not a non-negative integer"))
    };
    let arm = uint("arm")?;
    let stamp = uint("stamp")?;
    let d = obj
        .get("d")
        .and_then(Value::as_f64)
        .filter(|d| *d >= 0.0)
        .ok_or_else(|| field_err("d", "missing or not a non-negative number"))?;
    let steps = obj
        .get("traj")
        .and_then(Value::as_array)
        .ok_or_else(|| field_err("traj", "missing or not an array"))?;
    if steps.len() != horizon {
        return Err(field_err("traj", format!("traj length != H ({} != {horizon})", steps.len())));
    }
    let mut trajectory = Vec::with_capacity(horizon);
    for step in steps {
        let centers = step
            .as_array()
            .ok_or_else(|| field_err("traj", "step is not an array"))?
            .iter()
            .map(|c| {
                let xyz = c.as_array().filter(|a| a.len() == 3).ok_or_else(|| field_err("traj", "center is not [x, y, z]"))?;
                let f = |i: usize| xyz[i].as_f64().ok_or_else(|| field_err("traj", "non-numeric coordinate"));
                Ok(Vector3::new(f(0)?, f(1)?, f(2)?))
            })
            .collect::<Result<Vec<_>>>()?;
        trajectory.push(centers);
    }
    Ok(BoardEntry {
        arm,
        trajectory,
        goal_distance: d,
        stamp,
    })
}

/// Writes entries as newline-delimited JSON.
pub fn write_entries<W: Write>(mut out: W, entries: &[BoardEntry]) -> Result<()> {
    for e in entries {
        writeln!(out, "{}", encode_entry(e))?;
    }
    Ok(())
}

/// Publishes every line of `input` to `board`; returns how many entries
/// replaced a slot.
pub fn pump_into<R: BufRead>(board: &IntentionBoard, input: R) -> Result<usize> {
    let mut accepted = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if board.publish(decode_entry(&line, board.horizon())?)? {
            accepted += 1;
        }
    }
    Ok(accepted)
}

/// How an agent perceives the other arms.
pub enum Others<'a> {
    /// Published intents, scaled by goal-distance prioritization.
    Intents {
        entries: &'a [Arc<BoardEntry>],
        board: &'a IntentionBoard,
        trust: f64,
    },
    /// Other arms are not considered beyond what the obstacle list holds.
    Ignore,
}

/// What one control step produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub action: Vec<f64>,
    pub ok: bool,
    pub plan_time: Duration,
    pub goal_distance: f64,
    /// Newly published intent, if any.
    pub intent: Option<BoardEntry>,
    /// Largest `t - stamp` over the intents read.
    pub max_staleness: usize,
}

/// One arm's decentralized controller.
#[derive(Clone, Debug)]
pub struct Agent {
    pub id: usize,
    pub model: ArmModel,
    pub planner: Planner,
    pub weights: CostWeights,
}

impl Agent {
    pub fn new(id: usize, model: ArmModel, config: PlannerConfig, weights: CostWeights) -> Result<Self> {
        model.validate()?;
        weights.validate()?;
        let planner = Planner::new(config, model.limits.clone(), weights.discount)?;
        Ok(Agent {
            id,
            model,
            planner,
            weights,
        })
    }

    pub fn goal_distance(&self, state: &RobotState, goal: &GoalSpec) -> f64 {
        match forward_kinematics(&self.model, &state.q) {
            Ok(fk) => pose_cost(&fk.end_effector, goal, 0.0),
            Err(_) => f64::INFINITY,
        }
    }

    /// Shift, optimize against `others`, and (when `publish`) build the new
    /// intent from the mean trajectory. Timing covers all of it.
    pub fn control_step(
        &mut self,
        state: &RobotState,
        goal: &GoalSpec,
        obstacles: &[Obstacle],
        others: Others<'_>,
        publish: bool,
        t: usize,
    ) -> StepOutcome {
        let start = Instant::now();
        let d_self = self.goal_distance(state, goal);
        self.planner.shift();
        let mut max_staleness = 0;
        let intents: Vec<Intent<'_>> = match &others {
            Others::Intents { entries, board, trust } => entries
                .iter()
                .filter_map(|e| {
                    let radii = board.radii(e.arm)?;
                    let offset = t.saturating_sub(e.stamp);
                    max_staleness = max_staleness.max(offset);
                    let alpha = priority_factor(d_self, e.goal_distance, *trust);
                    Some(Intent::new(&e.trajectory, radii, alpha, offset))
                })
                .collect(),
            Others::Ignore => vec![],
        };
        let cfg = &self.planner.config;
        let objective = ArmCost::new(&self.model, *goal, obstacles, intents, &self.weights, cfg.horizon, cfg.dt);
        let out = self.planner.plan_step(state, &objective);
        let intent = (publish && out.ok).then(|| BoardEntry {
            arm: self.id,
            trajectory: sphere_trajectory(&self.model, &out.mean_states),
            goal_distance: if d_self.is_finite() { d_self } else { 0.0 },
            stamp: t,
        });
        StepOutcome {
            action: out.action,
            ok: out.ok,
            plan_time: start.elapsed(),
            goal_distance: d_self,
            intent,
            max_staleness,
        }
    }
}

/// What an agent needs from the world it runs in.
pub trait AgentEnv {
    /// Current state, or `None` to stop the loop.
    fn sense(&mut self, t: usize) -> Option<RobotState>;
    fn goal(&self) -> GoalSpec;
    fn obstacles(&self) -> Vec<Obstacle>;
    fn actuate(&mut self, action: &[f64], outcome: &StepOutcome);
}

/// Runs an agent against `board` until `t_max` steps or the environment
/// stops it. On planner failure the previous intent stays on the board and
/// the arm brakes.
pub fn agent_loop<E: AgentEnv>(
    agent: &mut Agent,
    board: &IntentionBoard,
    env: &mut E,
    trust: f64,
    t_max: usize,
) -> Result<Vec<StepOutcome>> {
    board.register_radii(agent.id, agent.model.radii())?;
    let mut log = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let Some(state) = env.sense(t) else { break };
        let entries = board.read_intents(agent.id);
        let goal = env.goal();
        let obstacles = env.obstacles();
        let others = Others::Intents {
            entries: &entries,
            board,
            trust,
        };
        let mut outcome = agent.control_step(&state, &goal, &obstacles, others, true, t);
        if let Some(entry) = outcome.intent.clone() {
            board.publish(entry)?;
        }
        if !outcome.ok {
            outcome.action = vec![0.0; agent.model.dof()];
        }
        env.actuate(&outcome.action, &outcome);
        log.push(outcome);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step;
    use crate::kinematics::Pose;
    use proptest::prelude::*;

    fn entry(arm: usize, stamp: usize, h: usize, x: f64) -> BoardEntry {
        BoardEntry {
            arm,
            trajectory: (0..h).map(|k| vec![Vector3::new(x, k as f64, 0.5), Vector3::new(-x, 0.25, 1e-3)]).collect(),
            goal_distance: 0.3,
            stamp,
        }
    }

    #[test]
    fn radii_registration() {
        let b = IntentionBoard::new(2, 3);
        b.register_radii(0, vec![0.1, 0.2]).unwrap();
        b.register_radii(1, vec![0.3]).unwrap();
        assert_eq!(b.radii(0).unwrap(), &[0.1, 0.2]);
        assert_eq!(b.radii(1).unwrap(), &[0.3]);
        b.register_radii(0, vec![0.1, 0.2]).unwrap();
        assert!(matches!(b.register_radii(0, vec![0.5]), Err(Error::RadiiConflict { arm: 0 })));
        assert!(b.register_radii(7, vec![0.5]).is_err());
    }

    #[test]
    fn publish_and_read() {
        let b = IntentionBoard::new(4, 2);
        assert!(b.read_intents(0).is_empty());
        assert!(b.publish(entry(1, 0, 2, 1.0)).unwrap());
        let got = b.read_intents(0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].stamp, 0);
        assert!(b.publish(entry(1, 1, 2, 2.0)).unwrap());
        assert_eq!(b.read_intents(0)[0].trajectory[0][0].x, 2.0);
        // Stale stamp is ignored.
        assert!(!b.publish(entry(1, 1, 2, 3.0)).unwrap());
        assert_eq!(b.latest(1).unwrap().trajectory[0][0].x, 2.0);
        for arm in 0..4 {
            b.publish(entry(arm, 5, 2, 0.0)).unwrap();
        }
        let got = b.read_intents(2);
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|e| e.arm != 2));
        assert!(b.publish(entry(0, 9, 3, 0.0)).is_err());
    }

    #[test]
    fn concurrent_readers_never_see_torn_entries() {
        let b = Arc::new(IntentionBoard::new(2, 8));
        std::thread::scope(|s| {
            s.spawn(|| {
                for stamp in 0..2000 {
                    b.publish(entry(0, stamp, 8, stamp as f64)).unwrap();
                }
            });
            for _ in 0..2 {
                s.spawn(|| {
                    for _ in 0..2000 {
                        if let Some(e) = b.read_intents(1).first() {
                            let x = e.stamp as f64;
                            assert!(e.trajectory.iter().all(|c| c[0].x == x && c[1].x == -x));
                        }
                    }
                });
            }
        });
    }

    #[test]
    fn codec_errors_name_the_field() {
        let e = entry(1, 2, 3, 0.5);
        let line = encode_entry(&e);
        // Three steps where four are expected.
        let err = decode_entry(&line, 4).unwrap_err().to_string();
        assert!(err.contains("traj length != H"), "{err}");
        let err = decode_entry(r#"{"arm":-1,"stamp":0,"d":0.1,"traj":[]}"#, 0).unwrap_err().to_string();
        assert!(err.contains("arm"), "{err}");
        let err = decode_entry(r#"{"arm":1,"stamp":0,"traj":[]}"#, 0).unwrap_err().to_string();
        assert!(err.contains("`d`"), "{err}");
        let extra = line.replacen('{', r#"{"note":"hello","#, 1);
        assert_eq!(decode_entry(&extra, 3).unwrap(), e);
    }

    #[test]
    fn pump_publishes_lines() {
        let b = IntentionBoard::new(2, 3);
        let mut buf = Vec::new();
        write_entries(&mut buf, &[entry(0, 1, 3, 0.1), entry(1, 1, 3, 0.2), entry(0, 0, 3, 0.3)]).unwrap();
        assert_eq!(pump_into(&b, buf.as_slice()).unwrap(), 2);
        assert_eq!(b.latest(0).unwrap().trajectory[0][0].x, 0.1);
    }

    struct FreeSpace {
        state: RobotState,
        goal: GoalSpec,
        model: ArmModel,
        dt: f64,
    }

    impl AgentEnv for FreeSpace {
        fn sense(&mut self, _t: usize) -> Option<RobotState> {
            Some(self.state.clone())
        }
        fn goal(&self) -> GoalSpec {
            self.goal
        }
        fn obstacles(&self) -> Vec<Obstacle> {
            vec![]
        }
        fn actuate(&mut self, action: &[f64], _o: &StepOutcome) {
            self.state = step(&self.state, action, &self.model.limits, self.dt).unwrap();
        }
    }

    fn small_config(seed: u64) -> PlannerConfig {
        PlannerConfig {
            horizon: 12,
            rollouts: 32,
            iterations: 2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn lone_agent_matches_direct_planner() {
        let model = ArmModel::spatial3();
        let goal = GoalSpec::position(Vector3::new(0.4, 0.1, 0.3));
        let weights = CostWeights::default();
        let mut agent = Agent::new(0, model.clone(), small_config(3), weights.clone()).unwrap();
        let board = IntentionBoard::new(1, 12);
        let q0 = vec![0.0, 1.4, -2.2];
        let mut env = FreeSpace {
            state: RobotState::at_rest(q0.clone()),
            goal: goal,
            model: model.clone(),
            dt: 1.0 / 60.0,
        };
        let log = agent_loop(&mut agent, &board, &mut env, 3.0, 25).unwrap();
        assert_eq!(log.len(), 25);

        let mut planner = Planner::new(small_config(3), model.limits.clone(), weights.discount).unwrap();
        let mut state = RobotState::at_rest(q0);
        for rec in &log {
            planner.shift();
            let cost = ArmCost::new(&model, goal, &[], vec![], &weights, 12, 1.0 / 60.0);
            let out = planner.plan_step(&state, &cost);
            assert_eq!(out.action, rec.action);
            state = step(&state, &out.action, &model.limits, 1.0 / 60.0).unwrap();
        }
        assert_eq!(state, env.state);
    }

    #[test]
    fn approaching_intent_raises_cost() {
        let a = ArmModel::spatial3().with_base(Pose::from_position_yaw(Vector3::new(-0.35, 0.0, 0.0), 0.0));
        let b = ArmModel::spatial3().with_base(Pose::from_position_yaw(Vector3::new(0.35, 0.0, 0.0), std::f64::consts::PI));
        let board = IntentionBoard::new(2, 12);
        board.register_radii(1, b.radii()).unwrap();
        let reach_in = RobotState::at_rest(vec![0.0, 0.6, -0.6]);
        let states = vec![reach_in.clone(); 12];
        board
            .publish(BoardEntry {
                arm: 1,
                trajectory: sphere_trajectory(&b, &states),
                goal_distance: 0.2,
                stamp: 0,
            })
            .unwrap();
        let entries = board.read_intents(0);
        let w = CostWeights::default();
        let goal = GoalSpec::position(Vector3::new(0.0, 0.0, 0.3));
        let intents = vec![Intent::new(&entries[0].trajectory, board.radii(1).unwrap(), 1.0, 1)];
        let cost = ArmCost::new(&a, goal, &[], intents, &w, 12, 1.0 / 60.0);
        assert!(cost.terms(&reach_in.q, &reach_in.qd, 0).dynamic > 0.0);
        assert_eq!(board.trajectory_reads(), 1);
    }

    #[test]
    fn agent_loop_stops_at_t_max() {
        let model = ArmModel::planar(&[0.3, 0.3], 0.03);
        let mut agent = Agent::new(0, model.clone(), small_config(1), CostWeights::default()).unwrap();
        let board = IntentionBoard::new(1, 12);
        let mut env = FreeSpace {
            state: RobotState::at_rest(vec![0.3, 0.3]),
            goal: GoalSpec::position(Vector3::new(0.2, 0.3, 0.0)),
            model,
            dt: 1.0 / 60.0,
        };
        assert_eq!(agent_loop(&mut agent, &board, &mut env, 3.0, 7).unwrap().len(), 7);
        assert_eq!(board.latest(0).unwrap().stamp, 6);
    }

    proptest! {
        #[test]
        fn codec_round_trip(arm in 0usize..8, stamp in 0usize..100000, d in 0.0f64..5.0, h in 1usize..6, n in 1usize..5, xs in proptest::collection::vec(-2.0f64..2.0, 90)) {
            let trajectory = (0..h)
                .map(|k| (0..n).map(|i| {
                    let o = (k * n + i) * 3;
                    Vector3::new(xs[o], xs[o + 1], xs[o + 2])
                }).collect())
                .collect();
            let e = BoardEntry { arm, trajectory, goal_distance: d, stamp };
            prop_assert_eq!(decode_entry(&encode_entry(&e), h).unwrap(), e);
        }
    }
}

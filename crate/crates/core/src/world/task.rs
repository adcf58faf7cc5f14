use nalgebra::Vector3;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::scenario::{goal_is_admissible, sample_goal};
use super::{stream_rng, Scenario, TaskKind};
use crate::cost::GoalSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalEventKind {
    Reached,
    Timeout,
    /// Following target drifted out of the arm's workspace.
    Reset,
    Picked,
    Dropped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GoalEvent {
    pub step: usize,
    pub arm: usize,
    pub kind: GoalEventKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinPhase {
    ToPick,
    /// Loaded, waiting for a cell to become available.
    Waiting,
    ToDrop(usize),
}

/// Maximum number of arms heading for a drop at once, per bin level.
const BIN_CONCURRENCY: [usize; 5] = [1, 2, 4, 2, 4];

/// Per-task goal automaton for every arm.
#[derive(Clone, Debug)]
pub struct TaskState {
    pub goals: Vec<Vector3<f64>>,
    /// Steps since each arm's current goal was set.
    pub timers: Vec<usize>,
    /// Goals reached, or objects dropped for the bin task.
    pub scores: Vec<usize>,
    pub events: Vec<GoalEvent>,
    velocities: Vec<Vector3<f64>>,
    phases: Vec<BinPhase>,
    eligible_cells: Vec<Vec<usize>>,
    waypoint_index: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
    timeout_steps: usize,
}

fn pick_spot(scenario: &Scenario, arm: usize) -> Vector3<f64> {
    let base = scenario.arms[arm].model.base;
    let bin = &scenario.task_params.bin;
    let mut behind = base.orientation * Vector3::new(-1.0, 0.0, 0.0);
    behind.z = 0.0;
    let p = base.position + behind.normalize() * bin.pick_offset;
    Vector3::new(p.x, p.y, bin.pick_height)
}

impl TaskState {
    pub fn new(scenario: &Scenario) -> Self {
        let n = scenario.arms.len();
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream_rng(scenario.seed, 0x600d + i as u64)).collect();
        let p = &scenario.task_params;
        let mut goals = Vec::with_capacity(n);
        let mut velocities = vec![Vector3::zeros(); n];
        for arm in 0..n {
            let g = match scenario.task {
                TaskKind::BinLoading => pick_spot(scenario, arm),
                TaskKind::Waypoints => Vector3::from(p.waypoints[arm][0]),
                _ => sample_goal(&mut rngs[arm], arm, scenario),
            };
            if scenario.task == TaskKind::Following {
                velocities[arm] = follow_velocity(&mut rngs[arm], p.follow_speed);
            }
            goals.push(g);
        }
        let eligible_cells = scenario
            .arms
            .iter()
            .map(|a| (0..4).filter(|&c| goal_is_admissible(&p.bin.drop_point(c), &a.model, scenario)).collect())
            .collect();
        TaskState {
            goals,
            timers: vec![0; n],
            scores: vec![0; n],
            events: vec![],
            velocities,
            phases: vec![BinPhase::ToPick; n],
            eligible_cells,
            waypoint_index: vec![0; n],
            rngs,
            timeout_steps: (p.goal_timeout / scenario.dt).round().max(1.0) as usize,
        }
    }

    pub fn goal(&self, arm: usize) -> GoalSpec {
        GoalSpec::position(self.goals[arm])
    }

    /// True once every arm has reached its last waypoint. Other tasks never
    /// finish before the step limit.
    pub fn finished(&self, scenario: &Scenario) -> bool {
        scenario.task == TaskKind::Waypoints
            && self.scores.iter().zip(&scenario.task_params.waypoints).all(|(s, w)| *s >= w.len())
    }

    pub fn total_score(&self) -> usize {
        self.scores.iter().sum()
    }

    /// Cell each arm is currently delivering to, if any.
    pub fn active_cells(&self) -> Vec<Option<usize>> {
        self.phases
            .iter()
            .map(|p| match p {
                BinPhase::ToDrop(c) => Some(*c),
                _ => None,
            })
            .collect()
    }

    /// First step at which `arm` raised a `Reached` event.
    pub fn first_reach(&self, arm: usize) -> Option<usize> {
        self.events
            .iter()
            .find(|e| e.arm == arm && e.kind == GoalEventKind::Reached)
            .map(|e| e.step)
    }

    /// Advances every arm's goal automaton given end-effector positions
    /// after the step `step` has been executed.
    pub fn update(&mut self, scenario: &Scenario, ee: &[Vector3<f64>], step: usize) {
        let tol = scenario.task_params.goal_tolerance;
        for arm in 0..self.goals.len() {
            self.timers[arm] += 1;
            let close = (ee[arm] - self.goals[arm]).norm() <= tol;
            match scenario.task {
                TaskKind::ReachingEasy | TaskKind::ReachingHard => {
                    let kind = if close {
                        self.scores[arm] += 1;
                        GoalEventKind::Reached
                    } else if self.timers[arm] >= self.timeout_steps {
                        GoalEventKind::Timeout
                    } else {
                        continue;
                    };
                    self.push(step, arm, kind);
                    self.goals[arm] = sample_goal(&mut self.rngs[arm], arm, scenario);
                }
                TaskKind::Following => {
                    let moved = self.goals[arm] + self.velocities[arm] * scenario.dt;
                    if goal_is_admissible(&moved, &scenario.arms[arm].model, scenario) {
                        self.goals[arm] = moved;
                    } else {
                        self.push(step, arm, GoalEventKind::Reset);
                        self.goals[arm] = sample_goal(&mut self.rngs[arm], arm, scenario);
                        self.velocities[arm] = follow_velocity(&mut self.rngs[arm], scenario.task_params.follow_speed);
                    }
                }
                TaskKind::BinLoading => self.update_bin(scenario, arm, close, step),
                TaskKind::Waypoints => {
                    // Finished once the last waypoint is reached.
                    if close && self.scores[arm] < scenario.task_params.waypoints[arm].len() {
                        self.scores[arm] += 1;
                        self.push(step, arm, GoalEventKind::Reached);
                        let list = &scenario.task_params.waypoints[arm];
                        if self.waypoint_index[arm] + 1 < list.len() {
                            self.waypoint_index[arm] += 1;
                            self.goals[arm] = Vector3::from(list[self.waypoint_index[arm]]);
                        }
                    }
                }
            }
        }
    }

    fn update_bin(&mut self, scenario: &Scenario, arm: usize, close: bool, step: usize) {
        match self.phases[arm] {
            BinPhase::ToPick if close => {
                self.push(step, arm, GoalEventKind::Picked);
                self.phases[arm] = BinPhase::Waiting;
            }
            BinPhase::ToDrop(_) if close => {
                self.scores[arm] += 1;
                self.push(step, arm, GoalEventKind::Dropped);
                self.phases[arm] = BinPhase::ToPick;
                self.goals[arm] = pick_spot(scenario, arm);
                return;
            }
            _ => {}
        }
        if self.phases[arm] == BinPhase::Waiting {
            let level = scenario.level as usize - 1;
            let active = self.active_cells();
            if active.iter().flatten().count() >= BIN_CONCURRENCY[level] {
                return;
            }
            let free: Vec<usize> = self.eligible_cells[arm]
                .iter()
                .copied()
                .filter(|c| level >= 3 || !active.contains(&Some(*c)))
                .collect();
            if let Some(&cell) = free.choose(&mut self.rngs[arm]) {
                self.phases[arm] = BinPhase::ToDrop(cell);
                self.goals[arm] = scenario.task_params.bin.drop_point(cell);
                self.timers[arm] = 0;
            }
        }
    }

    fn push(&mut self, step: usize, arm: usize, kind: GoalEventKind) {
        self.events.push(GoalEvent { step, arm, kind });
        self.timers[arm] = 0;
    }
}

fn follow_velocity(rng: &mut ChaCha8Rng, speed: f64) -> Vector3<f64> {
    let heading = rng.random_range(0.0..std::f64::consts::TAU);
    Vector3::new(heading.cos(), heading.sin(), 0.0) * speed
}

//! Obstacles, scenario generation and the per-task goal automata.

mod obstacle;
mod scenario;
mod task;

pub use obstacle::{advance_obstacles, signed_distance, Obstacle, Shape};
pub use scenario::{
    make_scenario, make_scenario_with, make_shared_region_scenario, ArmLayout, ArmPreset, ArmSetup, BinParams, GoalRegion, Scenario, ScenarioOptions,
    TaskKind, TaskParams,
};
pub use task::{GoalEvent, GoalEventKind, TaskState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream for `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Live obstacle set: constant-velocity motion plus respawn of dynamic
/// obstacles that leave the workspace.
#[derive(Clone, Debug)]
pub struct World {
    pub obstacles: Vec<Obstacle>,
    bound: f64,
    respawn: bool,
    speed: f64,
    rng: ChaCha8Rng,
}

impl World {
    pub fn new(scenario: &Scenario) -> Self {
        World {
            obstacles: scenario.obstacles.clone(),
            bound: scenario.task_params.workspace_half + 0.2,
            respawn: scenario.task_params.respawn_obstacles,
            speed: scenario.task_params.obstacle_speed,
            rng: stream_rng(scenario.seed, 0x0b57),
        }
    }

    pub fn advance(&mut self, dt: f64) {
        self.obstacles = advance_obstacles(&self.obstacles, dt);
        let bound = self.bound;
        let outside = |o: &Obstacle| o.dynamic && (o.pose.position.x.abs() > bound || o.pose.position.y.abs() > bound);
        if !self.respawn {
            self.obstacles.retain(|o| !outside(o));
            return;
        }
        for o in self.obstacles.iter_mut() {
            if outside(o) {
                let (pos, vel) = scenario::spawn_dynamic(&mut self.rng, bound - 0.2, self.speed);
                o.pose.position = pos;
                o.velocity = vel.into();
            }
        }
    }
}

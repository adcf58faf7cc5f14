//! Fixtures shared by the benchmarks under `benches/`.

use mrstorm::cost::{ArmCost, CostWeights, GoalSpec};
use mrstorm::kinematics::ArmModel;
use mrstorm::mppi::{Planner, PlannerConfig};
use mrstorm::world::{make_scenario_with, ArmLayout, ArmPreset, Obstacle, ScenarioOptions, TaskKind};
use mrstorm::RobotState;
use nalgebra::Vector3;

/// One arm at home, a goal in front of it and the level's obstacles.
pub struct ReachFixture {
    pub model: ArmModel,
    pub state: RobotState,
    pub goal: GoalSpec,
    pub obstacles: Vec<Obstacle>,
    pub weights: CostWeights,
}

impl ReachFixture {
    pub fn new(preset: ArmPreset, level: u8) -> Self {
        let opts = ScenarioOptions {
            preset,
            layout: ArmLayout::Corners { count: 4 },
            ..Default::default()
        };
        let s = make_scenario_with(TaskKind::ReachingEasy, level, 7, &opts).expect("valid scenario");
        let arm = &s.arms[0];
        let ahead = arm.model.base.transform_point(&Vector3::new(0.45, 0.1, 0.3));
        ReachFixture {
            model: arm.model.clone(),
            state: RobotState::at_rest(arm.q0.clone()),
            goal: GoalSpec::position(ahead),
            obstacles: s.obstacles,
            weights: CostWeights::default(),
        }
    }

    pub fn planner(&self, rollouts: usize, iterations: usize) -> Planner {
        let config = PlannerConfig {
            rollouts,
            iterations,
            ..Default::default()
        };
        Planner::new(config, self.model.limits.clone(), self.weights.discount).expect("valid planner")
    }

    pub fn cost(&self, horizon: usize) -> ArmCost<'_> {
        ArmCost::new(&self.model, self.goal, &self.obstacles, vec![], &self.weights, horizon, 1.0 / 60.0)
    }
}

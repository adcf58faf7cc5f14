//! Decentralized multi-arm sampling-based MPC: each arm runs its own
//! sampling planner and shares its predicted sphere trajectory with the
//! others through an intention board.

pub mod coordination;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod mppi;
pub mod world;

pub use coordination::{Agent, BoardEntry, IntentionBoard};
pub use cost::{ArmCost, CostWeights, GoalKind, GoalSpec};
pub use dynamics::RobotState;
pub use error::{Error, Result};
pub use harness::{run_trial, AlgoKind, AlgoMode, Metrics, TrialConfig, TrialResult};
pub use kinematics::{ArmModel, JointLimits, Pose, SphereSet};
pub use mppi::{Planner, PlannerConfig};
pub use world::{make_scenario, make_scenario_with, Obstacle, Scenario, ScenarioOptions, TaskKind};

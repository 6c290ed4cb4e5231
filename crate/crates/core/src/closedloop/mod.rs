//! Synthetic world, scripted expert and the slow/fast observe-plan-act loop.

pub mod expert;
pub mod rollout;
pub mod world;

pub use expert::{expert_done, scripted_expert, DropInjector};
pub use rollout::{
    evaluate, run_closed_loop, trial_seed, DiffusionPlanner, EvalTable, Executor, ExpertExecutor,
    LoopLimits, OraclePlanner, Planner, PolicyExecutor, RolloutResult,
};
pub use world::{world_step, TaskSpec, WorldConfig, WorldState};

//! Scripted pick-and-place expert.

use super::world::{dist, TaskSpec, WorldConfig, WorldState};

/// Height the expert retreats to after a successful release.
pub const RETREAT_HEIGHT: f64 = 0.25;

fn move_toward(from: [f64; 3], to: [f64; 3], max_step: f64) -> [f64; 3] {
    let d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm <= max_step {
        d
    } else {
        d.map(|v| v * max_step / norm)
    }
}

/// Finite-state expert: approach the target object, close once it can be
/// reached in one step, carry it to the goal, open there, then retreat
/// upward. A closed gripper that holds nothing useful is opened first.
///
/// The action depends only on `(state, task)`.
pub fn scripted_expert(state: &WorldState, task: &TaskSpec, cfg: &WorldConfig) -> [f64; 4] {
    let target = task.target_object();
    let pos = state.gripper_pos;
    let goal = state
        .goal_regions
        .iter()
        .find(|g| g.object_id == target)
        .or(state.goal_regions.first());
    let act = |to: [f64; 3], grip: f64| {
        let d = move_toward(pos, to, cfg.max_step);
        [d[0], d[1], d[2], grip]
    };
    if state.held_object == Some(target) {
        let Some(goal) = goal else {
            return [0.0, 0.0, 0.0, 1.0];
        };
        let grip = if dist(pos, goal.target) <= cfg.max_step {
            0.0
        } else {
            1.0
        };
        return act(goal.target, grip);
    }
    if state.is_success() {
        let g = goal.map(|g| g.target).unwrap_or(pos);
        return act([g[0], g[1], RETREAT_HEIGHT], 0.0);
    }
    if !state.gripper_open {
        return [0.0, 0.0, 0.0, 0.0];
    }
    let Some(obj) = state.object(target) else {
        return [0.0; 4];
    };
    let grip = if dist(pos, obj.pos) <= cfg.max_step {
        1.0
    } else {
        0.0
    };
    act(obj.pos, grip)
}

/// True once the expert has nothing left to do: the task is solved and the
/// gripper sits at its retreat pose.
pub fn expert_done(state: &WorldState, task: &TaskSpec) -> bool {
    if !state.is_success() {
        return false;
    }
    let target = task.target_object();
    let goal = state
        .goal_regions
        .iter()
        .find(|g| g.object_id == target)
        .or(state.goal_regions.first());
    match goal {
        Some(g) => {
            dist(
                state.gripper_pos,
                [g.target[0], g.target[1], RETREAT_HEIGHT],
            ) < 1e-9
        }
        None => true,
    }
}

/// Applies a task's forced-drop perturbation at most once per rollout.
#[derive(Debug, Clone, Default)]
pub struct DropInjector {
    held_steps: u64,
    fired: bool,
}

impl DropInjector {
    /// Call after each world step; returns true when the drop fires.
    pub fn after_step(
        &mut self,
        state: &mut WorldState,
        task: &TaskSpec,
        cfg: &WorldConfig,
    ) -> bool {
        let Some(ev) = task.perturbation else {
            return false;
        };
        if self.fired {
            return false;
        }
        if state.held_object == Some(task.target_object()) {
            self.held_steps += 1;
            if self.held_steps >= ev.after_grasp_steps {
                state.force_drop(cfg);
                self.fired = true;
                return true;
            }
        } else {
            self.held_steps = 0;
        }
        false
    }

    pub fn fired(&self) -> bool {
        self.fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::world::world_step;

    fn run(task: &TaskSpec, seed: u64, limit: usize) -> (bool, usize, Vec<bool>) {
        let cfg = WorldConfig::default();
        let mut s = task.reset(seed, &cfg);
        let mut inj = DropInjector::default();
        let mut opens = vec![s.gripper_open];
        for step in 0..limit {
            if expert_done(&s, task) {
                return (true, step, opens);
            }
            let a = scripted_expert(&s, task, &cfg);
            s = world_step(&s, a, &cfg).unwrap();
            inj.after_step(&mut s, task, &cfg);
            opens.push(s.gripper_open);
        }
        (s.is_success(), limit, opens)
    }

    fn transitions(opens: &[bool]) -> usize {
        opens.windows(2).filter(|w| w[0] != w[1]).count()
    }

    #[test]
    fn expert_solves_pick_place_on_100_seeds() {
        let task = TaskSpec::pick_place();
        for seed in 0..100 {
            let (ok, steps, opens) = run(&task, seed, 400);
            assert!(ok && steps < 400, "seed {seed} failed after {steps} steps");
            assert_eq!(transitions(&opens), 2, "seed {seed}");
        }
    }

    #[test]
    fn expert_solves_distractor_tasks() {
        for target in 0..2 {
            let task = TaskSpec::distractor(target);
            for seed in 0..50 {
                let (ok, _, _) = run(&task, seed, 400);
                assert!(ok, "target {target} seed {seed}");
            }
        }
    }

    #[test]
    fn expert_recovers_from_forced_drop() {
        let task = TaskSpec::pick_place().with_drop(10);
        for seed in 0..30 {
            let (ok, _, opens) = run(&task, seed, 600);
            assert!(ok, "seed {seed}");
            assert_eq!(transitions(&opens), 4, "seed {seed}");
        }
    }

    #[test]
    fn expert_is_deterministic() {
        let cfg = WorldConfig::default();
        let task = TaskSpec::pick_place();
        let s = task.reset(4, &cfg);
        assert_eq!(
            scripted_expert(&s, &task, &cfg),
            scripted_expert(&s.clone(), &task, &cfg)
        );
    }
}

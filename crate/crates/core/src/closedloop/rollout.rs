//! The observe-plan-act loop: a slow planner issues flow plans and a fast
//! executor runs action chunks conditioned on the current plan.

use std::io::{BufRead, Write};

use super::expert::{scripted_expert, DropInjector};
use super::world::{keypoint_offsets, keypoints_at, world_step, TaskSpec, WorldConfig, WorldState};
use crate::datagen::{resample_keyframes, AtomicSegment};
use crate::diffusion::{sample_flow, DiffusionSchedule, SampleConfig};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, FlowTensor};
use crate::net::{encode_condition, Checkpoint};
use crate::policy::{act, BaseState, PolicyCheckpoint};

/// Slow system: one flow plan from the current world.
pub trait Planner {
    fn plan(&mut self, state: &WorldState, task: &TaskSpec, seed: u64) -> Result<FlowTensor>;
}

/// Fast system: one action chunk from the current world and a plan.
pub trait Executor {
    fn chunk(
        &mut self,
        state: &WorldState,
        task: &TaskSpec,
        plan: &FlowTensor,
    ) -> Result<ActionChunk>;
}

/// Diffusion planner conditioned on the observation, the task and the
/// current keypoint positions as query points.
pub struct DiffusionPlanner<'a> {
    pub ck: &'a Checkpoint,
    pub sched: &'a DiffusionSchedule,
    pub sample: SampleConfig,
}

impl Planner for DiffusionPlanner<'_> {
    fn plan(&mut self, state: &WorldState, task: &TaskSpec, seed: u64) -> Result<FlowTensor> {
        let query: Vec<[f64; 2]> =
            keypoints_at(state.gripper_pos, &keypoint_offsets(self.ck.cfg.n))
                .iter()
                .map(|p| [p[0], p[1]])
                .collect();
        let cond = encode_condition(
            &self.ck.store,
            &self.ck.cfg,
            &state.observation(),
            task.task_id,
            Some(&query),
        )?;
        sample_flow(self.ck, &cond, self.sched, &self.sample, seed)
    }
}

/// Emits the flow the scripted expert would produce until its next gripper
/// transition, resampled like the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePlanner {
    pub k: usize,
    pub n: usize,
    pub gamma: f64,
    pub world: WorldConfig,
    /// Longest expert lookahead in steps.
    pub horizon: usize,
}

impl Planner for OraclePlanner {
    fn plan(&mut self, state: &WorldState, task: &TaskSpec, _seed: u64) -> Result<FlowTensor> {
        let offsets = keypoint_offsets(self.n);
        let mut s = state.clone();
        let mut positions = vec![s.gripper_pos];
        for _ in 0..self.horizon {
            let next = world_step(&s, scripted_expert(&s, task, &self.world), &self.world)?;
            if next.gripper_open != state.gripper_open || next.gripper_pos == s.gripper_pos {
                break;
            }
            s = next;
            positions.push(s.gripper_pos);
        }
        let seg = AtomicSegment {
            start: 0,
            end: positions.len() - 1,
            gripper_state: (!state.gripper_open) as u8,
        };
        let frames = resample_keyframes(&seg, 0, self.k, self.gamma)?;
        let values = frames
            .iter()
            .flat_map(|&t| keypoints_at(positions[t], &offsets))
            .flatten()
            .collect();
        FlowTensor::with_unit_weights(self.k, self.n, values)
    }
}

/// Executes the trained policy.
pub struct PolicyExecutor<'a> {
    pub ck: &'a PolicyCheckpoint,
}

impl Executor for PolicyExecutor<'_> {
    fn chunk(
        &mut self,
        state: &WorldState,
        task: &TaskSpec,
        plan: &FlowTensor,
    ) -> Result<ActionChunk> {
        let base = BaseState {
            observation: state.observation(),
            task_id: task.task_id,
            proprio: state.proprioception(),
        };
        Ok(act(self.ck, &[base], &[plan])?.remove(0))
    }
}

/// Runs the scripted expert for `horizon` steps on a copy of the world and
/// ignores the plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertExecutor {
    pub world: WorldConfig,
    pub horizon: usize,
}

impl Executor for ExpertExecutor {
    fn chunk(
        &mut self,
        state: &WorldState,
        task: &TaskSpec,
        _plan: &FlowTensor,
    ) -> Result<ActionChunk> {
        let mut s = state.clone();
        let (mut deltas, mut gripper) = (
            Vec::with_capacity(self.horizon),
            Vec::with_capacity(self.horizon),
        );
        for _ in 0..self.horizon {
            let a = scripted_expert(&s, task, &self.world);
            deltas.push([a[0], a[1], a[2]]);
            gripper.push(a[3]);
            s = world_step(&s, a, &self.world)?;
        }
        ActionChunk::new(deltas, gripper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoopLimits {
    pub max_plans: usize,
    pub max_steps: u64,
    /// When false the first plan is kept for the whole rollout.
    pub replan: bool,
}

impl Default for LoopLimits {
    fn default() -> Self {
        Self {
            max_plans: 12,
            max_steps: 2000,
            replan: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub gripper_pos: [f64; 3],
    pub gripper_open: bool,
    pub held_object: Option<usize>,
    pub objects: Vec<[f64; 3]>,
    pub plan_id: usize,
}

impl TraceRecord {
    fn of(state: &WorldState, plan_id: usize) -> Self {
        Self {
            step: state.step,
            gripper_pos: state.gripper_pos,
            gripper_open: state.gripper_open,
            held_object: state.held_object,
            objects: state.objects.iter().map(|o| o.pos).collect(),
            plan_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub steps_used: u64,
    pub plans_issued: usize,
    /// Every plan handed to the executor, in order.
    pub plans: Vec<FlowTensor>,
    /// World step at which each plan was issued.
    pub plan_steps: Vec<u64>,
    /// The initial world followed by one record per step.
    pub trace: Vec<TraceRecord>,
    /// World step at which the task's forced drop fired, if it did.
    pub drop_step: Option<u64>,
}

/// Seed of plan `i` within a rollout.
fn plan_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(i as u64 * 7919 + 1)
}

/// Plans, then runs up to `r` chunks on that plan, re-reading the world
/// before each chunk. Any gripper transition during a chunk ends the plan
/// at the next chunk boundary. Stops on success, the step limit or the plan
/// limit.
pub fn run_closed_loop(
    planner: &mut dyn Planner,
    executor: &mut dyn Executor,
    task: &TaskSpec,
    world: &WorldConfig,
    r: usize,
    limits: &LoopLimits,
    seed: u64,
) -> Result<RolloutResult> {
    if r == 0 {
        return Err(Error::InvalidArgument("r must be at least 1".into()));
    }
    task.validate()?;
    world.validate()?;
    let mut state = task.reset(seed, world);
    let mut inj = DropInjector::default();
    let mut res = RolloutResult {
        success: false,
        steps_used: 0,
        plans_issued: 0,
        plans: Vec::new(),
        plan_steps: Vec::new(),
        trace: vec![TraceRecord::of(&state, 0)],
        drop_step: None,
    };
    'outer: while !state.is_success()
        && state.step < limits.max_steps
        && res.plans_issued < limits.max_plans.max(1)
    {
        let plan = planner.plan(&state, task, plan_seed(seed, res.plans_issued))?;
        res.plans.push(plan);
        res.plan_steps.push(state.step);
        res.plans_issued += 1;
        let plan_id = res.plans_issued - 1;
        let plan = &res.plans[plan_id];
        let mut chunks = 0;
        while !limits.replan || chunks < r {
            let chunk = executor.chunk(&state, task, plan)?;
            let mut transition = false;
            for i in 0..chunk.horizon() {
                let was_open = state.gripper_open;
                state = world_step(&state, chunk.action(i), world)?;
                if inj.after_step(&mut state, task, world) {
                    res.drop_step = Some(state.step);
                }
                transition |= state.gripper_open != was_open;
                res.trace.push(TraceRecord::of(&state, plan_id));
                if state.is_success() || state.step >= limits.max_steps {
                    break 'outer;
                }
            }
            chunks += 1;
            if limits.replan && transition {
                break;
            }
        }
        if !limits.replan {
            break;
        }
    }
    res.success = state.is_success();
    res.steps_used = state.step;
    Ok(res)
}

/// Writes one line per trace record:
/// `step gripper_open held x y z plan_id` then `x y z` per object.
pub fn write_trace<W: Write>(w: &mut W, trace: &[TraceRecord]) -> Result<()> {
    for t in trace {
        let held = t.held_object.map_or(-1, |h| h as i64);
        write!(
            w,
            "{} {} {} {:?} {:?} {:?} {}",
            t.step,
            t.gripper_open as u8,
            held,
            t.gripper_pos[0],
            t.gripper_pos[1],
            t.gripper_pos[2],
            t.plan_id
        )?;
        for o in &t.objects {
            write!(w, " {:?} {:?} {:?}", o[0], o[1], o[2])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let bad = |line: usize, what: &str| Error::Format(format!("trace line {line}: {what}"));
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 7 || (f.len() - 7) % 3 != 0 {
            return Err(bad(i + 1, "field count"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, s));
        let held: i64 = f[2].parse().map_err(|_| bad(i + 1, f[2]))?;
        out.push(TraceRecord {
            step: f[0].parse().map_err(|_| bad(i + 1, f[0]))?,
            gripper_open: f[1] == "1",
            held_object: (held >= 0).then_some(held as usize),
            gripper_pos: [num(f[3])?, num(f[4])?, num(f[5])?],
            plan_id: f[6].parse().map_err(|_| bad(i + 1, f[6]))?,
            objects: f[7..]
                .chunks(3)
                .map(|c| Ok([num(c[0])?, num(c[1])?, num(c[2])?]))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task_id: usize,
    pub trials: usize,
    pub successes: usize,
}

impl EvalRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub r: usize,
    pub rows: Vec<EvalRow>,
}

pub const EVAL_HEADER: &str = "task_id,trials,successes,success_rate";

impl EvalTable {
    /// Mean of the per-task success rates.
    pub fn average(&self) -> f64 {
        self.rows.iter().map(EvalRow::rate).sum::<f64>() / self.rows.len().max(1) as f64
    }

    /// One row per task and a final `average` row.
    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{EVAL_HEADER}")?;
        for row in &self.rows {
            writeln!(
                w,
                "{},{},{},{:.4}",
                row.task_id,
                row.trials,
                row.successes,
                row.rate()
            )?;
        }
        let (t, s) = self
            .rows
            .iter()
            .fold((0, 0), |(t, s), r| (t + r.trials, s + r.successes));
        writeln!(w, "average,{t},{s},{:.4}", self.average())?;
        Ok(())
    }
}

/// Seed of trial `i` of suite entry `j`.
pub fn trial_seed(seed: u64, j: usize, i: usize) -> u64 {
    seed ^ ((j as u64) << 32 | i as u64).wrapping_mul(0xa076_1d64_78bd_642f)
}

/// Success rates over `trials` seeded rollouts of every task in `suite`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    planner: &mut dyn Planner,
    executor: &mut dyn Executor,
    suite: &[TaskSpec],
    world: &WorldConfig,
    trials: usize,
    r: usize,
    limits: &LoopLimits,
    seed: u64,
) -> Result<EvalTable> {
    if trials == 0 {
        return Err(Error::NoTrials);
    }
    if suite.is_empty() {
        return Err(Error::InvalidArgument("empty task suite".into()));
    }
    let mut rows = Vec::with_capacity(suite.len());
    for (j, task) in suite.iter().enumerate() {
        let mut successes = 0;
        for i in 0..trials {
            let res = run_closed_loop(
                planner,
                executor,
                task,
                world,
                r,
                limits,
                trial_seed(seed, j, i),
            )?;
            successes += res.success as usize;
        }
        rows.push(EvalRow {
            task_id: task.task_id,
            trials,
            successes,
        });
    }
    Ok(EvalTable { r, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle() -> OraclePlanner {
        OraclePlanner {
            k: 8,
            n: 4,
            gamma: 2.0,
            world: WorldConfig::default(),
            horizon: 400,
        }
    }

    fn expert() -> ExpertExecutor {
        ExpertExecutor {
            world: WorldConfig::default(),
            horizon: 20,
        }
    }

    #[test]
    fn oracle_and_expert_solve_nominal_tasks() {
        let suite = [
            TaskSpec::pick_place(),
            TaskSpec::distractor(0),
            TaskSpec::distractor(1),
        ];
        let table = evaluate(
            &mut oracle(),
            &mut expert(),
            &suite,
            &WorldConfig::default(),
            10,
            2,
            &LoopLimits::default(),
            4,
        )
        .unwrap();
        assert!(
            table.rows.iter().all(|r| r.successes == r.trials),
            "{table:?}"
        );
        assert_eq!(table.average(), 1.0);
    }

    #[test]
    fn zero_trials_is_an_error() {
        let e = evaluate(
            &mut oracle(),
            &mut expert(),
            &[TaskSpec::pick_place()],
            &WorldConfig::default(),
            0,
            1,
            &LoopLimits::default(),
            1,
        );
        assert!(matches!(e, Err(Error::NoTrials)));
    }

    #[test]
    fn oracle_plan_ends_at_the_next_transition() {
        let w = WorldConfig::default();
        let task = TaskSpec::pick_place();
        let s = task.reset(3, &w);
        let plan = oracle().plan(&s, &task, 0).unwrap();
        let obj = s.objects[0].pos;
        let last = plan.centroid(7);
        let offs = keypoint_offsets(4);
        let mean_off: Vec<f64> = (0..3)
            .map(|a| offs.iter().map(|o| o[a]).sum::<f64>() / 4.0)
            .collect();
        for a in 0..3 {
            assert!((last[a] - mean_off[a] - obj[a]).abs() <= w.max_step + 1e-9);
        }
        let first = plan.centroid(0);
        assert!((0..3).all(|a| (first[a] - mean_off[a] - s.gripper_pos[a]).abs() < 1e-12));
    }

    #[test]
    fn slower_replanning_issues_fewer_plans() {
        let w = WorldConfig::default();
        let task = TaskSpec::pick_place();
        for seed in 0..5 {
            let a = run_closed_loop(
                &mut oracle(),
                &mut expert(),
                &task,
                &w,
                1,
                &LoopLimits::default(),
                seed,
            )
            .unwrap();
            let b = run_closed_loop(
                &mut oracle(),
                &mut expert(),
                &task,
                &w,
                4,
                &LoopLimits::default(),
                seed,
            )
            .unwrap();
            assert!(a.success && b.success);
            assert!(b.plans_issued <= a.plans_issued);
            assert_eq!(
                a,
                run_closed_loop(
                    &mut oracle(),
                    &mut expert(),
                    &task,
                    &w,
                    1,
                    &LoopLimits::default(),
                    seed
                )
                .unwrap()
            );
        }
    }

    #[test]
    fn every_gripper_transition_is_followed_by_a_plan() {
        let w = WorldConfig::default();
        for (task, r) in [
            (TaskSpec::pick_place(), 4),
            (TaskSpec::pick_place().with_drop(10), 4),
            (TaskSpec::distractor(1), 2),
        ] {
            let res = run_closed_loop(
                &mut oracle(),
                &mut expert(),
                &task,
                &w,
                r,
                &LoopLimits::default(),
                11,
            )
            .unwrap();
            assert!(res.plans_issued >= 1);
            for win in res.trace.windows(2) {
                if win[0].gripper_open != win[1].gripper_open
                    && !res.trace.last().unwrap().eq(&win[1])
                {
                    // the transition happens inside a chunk; the next plan starts at the following boundary
                    let t = win[1].step;
                    let next_plan = res.plan_steps.iter().find(|&&s| s >= t);
                    let boundary = next_plan.copied().unwrap_or(res.steps_used);
                    assert!(
                        boundary - t < 20,
                        "transition at {t}, next plan at {boundary}"
                    );
                }
            }
            for rec in &res.trace {
                if let Some(h) = rec.held_object {
                    assert_eq!(rec.objects[h], rec.gripper_pos);
                }
            }
        }
    }

    #[test]
    fn forced_drop_triggers_a_new_plan() {
        let w = WorldConfig::default();
        let task = TaskSpec::pick_place().with_drop(8);
        let res = run_closed_loop(
            &mut oracle(),
            &mut expert(),
            &task,
            &w,
            4,
            &LoopLimits::default(),
            2,
        )
        .unwrap();
        let drop = res.trace.windows(2).find(|p| {
            p[0].held_object.is_some()
                && p[1].held_object.is_none()
                && p[1].objects[0][2] == w.rest_height
        });
        let t = drop.expect("drop happened")[1].step;
        assert_eq!(res.drop_step, Some(t));
        assert!(res.plan_steps.iter().any(|&s| s >= t && s < t + 20));
        assert!(res.success);
    }

    #[test]
    fn open_loop_keeps_the_first_plan() {
        let w = WorldConfig::default();
        let limits = LoopLimits {
            replan: false,
            max_steps: 300,
            ..LoopLimits::default()
        };
        let res = run_closed_loop(
            &mut oracle(),
            &mut expert(),
            &TaskSpec::pick_place(),
            &w,
            1,
            &limits,
            5,
        )
        .unwrap();
        assert_eq!(res.plans_issued, 1);
        assert!(res.trace.iter().all(|t| t.plan_id == 0));
    }

    #[test]
    fn trace_roundtrips() {
        let w = WorldConfig::default();
        let res = run_closed_loop(
            &mut oracle(),
            &mut expert(),
            &TaskSpec::distractor(0),
            &w,
            2,
            &LoopLimits::default(),
            8,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &res.trace).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), res.trace);
        assert!(read_trace("1 0 -1 0.5\n".as_bytes()).is_err());
    }

    #[test]
    fn eval_csv_is_stable() {
        let w = WorldConfig::default();
        let run = || {
            let t = evaluate(
                &mut oracle(),
                &mut expert(),
                &[TaskSpec::pick_place()],
                &w,
                3,
                1,
                &LoopLimits::default(),
                9,
            )
            .unwrap();
            let mut buf = Vec::new();
            t.write_csv(&mut buf).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.starts_with(EVAL_HEADER));
        assert!(a.contains("average,3,3,1.0000"));
    }
}

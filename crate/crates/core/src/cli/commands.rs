//! Command implementations. Each writes its artifacts and a short text
//! summary to `log`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::config::Config;
use super::svg::flow_projections;
use crate::closedloop::world::{TaskSpec, DISTRACTOR_TASKS, PICK_PLACE_TASK};
use crate::closedloop::{
    evaluate, rollout::write_trace, run_closed_loop, DiffusionPlanner, EvalTable, Executor,
    ExpertExecutor, OraclePlanner, Planner, PolicyExecutor, RolloutResult,
};
use crate::datagen::{generate_dataset, Dataset};
use crate::diffusion::{build_schedule, sample_flow, train, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_all, gradcheck_block, GradcheckReport};
use crate::net::{encode_condition, load_checkpoint, save_checkpoint, Checkpoint};
use crate::policy::train::bc_train;
use crate::policy::{load_policy, save_policy, PolicyCheckpoint};

/// Task list by name: `pick-place` (alias `nominal`), `distractor`, `all`,
/// or comma-separated task ids.
pub fn parse_suite(name: &str) -> Result<Vec<TaskSpec>> {
    match name {
        "pick-place" | "nominal" => Ok(vec![TaskSpec::pick_place()]),
        "distractor" => DISTRACTOR_TASKS
            .iter()
            .map(|&id| TaskSpec::from_id(id))
            .collect(),
        "all" => std::iter::once(PICK_PLACE_TASK)
            .chain(DISTRACTOR_TASKS)
            .map(TaskSpec::from_id)
            .collect(),
        ids => {
            ids.split(',')
                .map(|s| {
                    let id = s.trim().parse().map_err(|_| {
                        Error::InvalidArgument(format!("unknown task or suite {s:?}"))
                    })?;
                    TaskSpec::from_id(id)
                })
                .collect()
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))
}

fn check_open(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "no such file {}",
            path.display()
        )));
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    check_open(path)?;
    Dataset::load(path)
}

pub fn cmd_gen_data(
    cfg: &Config,
    suite: &str,
    episodes: usize,
    seed: u64,
    out: &Path,
    log: &mut dyn Write,
) -> Result<Dataset> {
    cfg.validate()?;
    let tasks = parse_suite(suite)?;
    let ds = generate_dataset(&tasks, episodes, seed, &cfg.data)?;
    ds.save(out)?;
    let c = ds.stats.center;
    writeln!(log, "pairs {}", ds.len())?;
    writeln!(log, "norm_center {} {} {}", c[0], c[1], c[2])?;
    writeln!(log, "norm_scale {}", ds.stats.scale)?;
    Ok(ds)
}

pub fn cmd_train(
    cfg: &Config,
    dataset: &Path,
    seed: u64,
    out: &Path,
    metrics: &Path,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    let mut m = create(metrics)?;
    let (ck, report) = train(&ds, &cfg.net, &cfg.train, seed, Some(&mut m))?;
    m.flush()?;
    save_checkpoint(out, &ck)?;
    writeln!(log, "steps {}", report.history.len())?;
    writeln!(log, "parameters {}", ck.store.num_scalars())?;
    writeln!(log, "loss_first {}", report.head_mean(1))?;
    writeln!(log, "loss_last100 {}", report.tail_mean(100))?;
    Ok(ck)
}

pub fn cmd_train_policy(
    cfg: &Config,
    dataset: &Path,
    planner: Option<&Path>,
    seed: u64,
    out: &Path,
    metrics: &Path,
    log: &mut dyn Write,
) -> Result<PolicyCheckpoint> {
    cfg.validate()?;
    let ds = load_dataset(dataset)?;
    let planner = planner
        .map(|p| check_open(p).and_then(|_| load_checkpoint(p, None)))
        .transpose()?;
    let mut m = create(metrics)?;
    let (ck, report) = bc_train(
        &ds,
        planner.as_ref(),
        &cfg.policy,
        &cfg.policy_train,
        seed,
        Some(&mut m),
    )?;
    m.flush()?;
    save_policy(out, &ck)?;
    writeln!(log, "steps {}", report.history.len())?;
    writeln!(log, "use_flow {}", ck.cfg.use_flow)?;
    writeln!(log, "loss_first {}", report.head_mean(1))?;
    writeln!(log, "loss_last100 {}", report.tail_mean(100))?;
    Ok(ck)
}

fn schedule(cfg: &Config) -> Result<DiffusionSchedule> {
    build_schedule(cfg.train.t_max, cfg.train.schedule)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &Config,
    planner: &Path,
    dataset: &Path,
    index: usize,
    seed: u64,
    out: &Path,
    svg: &Path,
    log: &mut dyn Write,
) -> Result<()> {
    cfg.validate()?;
    check_open(planner)?;
    let ck = load_checkpoint(planner, None)?;
    let ds = load_dataset(dataset)?;
    let pair = ds.pairs.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("index {index} out of range for {} pairs", ds.len()))
    })?;
    let cond = encode_condition(
        &ck.store,
        &ck.cfg,
        &pair.observation,
        pair.task_id,
        pair.query_points.as_deref(),
    )?;
    let flow = sample_flow(&ck, &cond, &schedule(cfg)?, &cfg.sample, seed)?;
    flow.write(&mut create(out)?)?;
    let mut s = create(svg)?;
    s.write_all(
        flow_projections(&[(&pair.target, "#999999", true), (&flow, "#c0392b", false)]).as_bytes(),
    )?;
    s.flush()?;
    let last = flow.keyframes() - 1;
    let (a, b) = (flow.centroid(last), pair.target.centroid(last));
    writeln!(log, "terminal_centroid {} {} {}", a[0], a[1], a[2])?;
    writeln!(log, "target_centroid {} {} {}", b[0], b[1], b[2])?;
    writeln!(
        log,
        "terminal_error {}",
        crate::closedloop::world::dist(a, b)
    )?;
    Ok(())
}

/// A planner checkpoint, or `oracle` for the scripted-expert planner.
pub enum PlannerArg {
    Oracle,
    Checkpoint(Box<Checkpoint>),
}

/// A policy checkpoint, or `expert` for the scripted expert.
pub enum PolicyArg {
    Expert,
    Checkpoint(Box<PolicyCheckpoint>),
}

pub fn load_planner_arg(arg: &str) -> Result<PlannerArg> {
    if arg == "oracle" {
        return Ok(PlannerArg::Oracle);
    }
    let p = Path::new(arg);
    check_open(p)?;
    Ok(PlannerArg::Checkpoint(Box::new(load_checkpoint(p, None)?)))
}

pub fn load_policy_arg(arg: &str) -> Result<PolicyArg> {
    if arg == "expert" {
        return Ok(PolicyArg::Expert);
    }
    let p = Path::new(arg);
    check_open(p)?;
    Ok(PolicyArg::Checkpoint(Box::new(load_policy(p)?)))
}

/// Runs `f` with the loop components described by the arguments.
fn with_loop<R>(
    cfg: &Config,
    planner: &PlannerArg,
    policy: &PolicyArg,
    f: impl FnOnce(&mut dyn Planner, &mut dyn Executor) -> Result<R>,
) -> Result<R> {
    cfg.validate()?;
    let world = cfg.data.episode.world;
    let (k, n) = match planner {
        PlannerArg::Oracle => (cfg.data.pairs.k, cfg.data.episode.n_keypoints),
        PlannerArg::Checkpoint(ck) => (ck.cfg.k, ck.cfg.n),
    };
    if let PolicyArg::Checkpoint(p) = policy {
        if (p.cfg.k, p.cfg.n) != (k, n) {
            return Err(Error::ConfigMismatch(format!(
                "planner emits K={k} N={n}, policy expects K={} N={}",
                p.cfg.k, p.cfg.n
            )));
        }
    }
    let sched = schedule(cfg)?;
    let mut oracle;
    let mut diffusion;
    let pl: &mut dyn Planner = match planner {
        PlannerArg::Oracle => {
            oracle = OraclePlanner {
                k,
                n,
                gamma: cfg.data.pairs.gamma,
                world,
                horizon: cfg.data.episode.max_steps,
            };
            &mut oracle
        }
        PlannerArg::Checkpoint(ck) => {
            diffusion = DiffusionPlanner {
                ck,
                sched: &sched,
                sample: cfg.sample,
            };
            &mut diffusion
        }
    };
    let mut expert;
    let mut learned;
    let ex: &mut dyn Executor = match policy {
        PolicyArg::Expert => {
            expert = ExpertExecutor {
                world,
                horizon: cfg.data.pairs.horizon,
            };
            &mut expert
        }
        PolicyArg::Checkpoint(ck) => {
            learned = PolicyExecutor { ck };
            &mut learned
        }
    };
    f(pl, ex)
}

fn with_drop(tasks: Vec<TaskSpec>, drop_after: Option<u64>) -> Vec<TaskSpec> {
    match drop_after {
        Some(d) => tasks.into_iter().map(|t| t.with_drop(d)).collect(),
        None => tasks,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_rollout(
    cfg: &Config,
    planner: &PlannerArg,
    policy: &PolicyArg,
    task: &str,
    drop_after: Option<u64>,
    seed: u64,
    trace: &Path,
    log: &mut dyn Write,
) -> Result<RolloutResult> {
    let tasks = with_drop(parse_suite(task)?, drop_after);
    let [task] = tasks.as_slice() else {
        return Err(Error::InvalidArgument(format!(
            "rollout needs exactly one task, {task:?} names {}",
            tasks.len()
        )));
    };
    let world = cfg.data.episode.world;
    let res = with_loop(cfg, planner, policy, |pl, ex| {
        run_closed_loop(pl, ex, task, &world, cfg.r, &cfg.limits, seed)
    })?;
    let mut w = create(trace)?;
    write_trace(&mut w, &res.trace)?;
    w.flush()?;
    writeln!(log, "success {}", res.success)?;
    writeln!(log, "steps_used {}", res.steps_used)?;
    writeln!(log, "plans_issued {}", res.plans_issued)?;
    if let Some(t) = res.drop_step {
        writeln!(log, "drop_step {t}")?;
    }
    let steps: Vec<String> = res.plan_steps.iter().map(u64::to_string).collect();
    writeln!(log, "plan_steps {}", steps.join(" "))?;
    Ok(res)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &Config,
    planner: &PlannerArg,
    policy: &PolicyArg,
    suite: &str,
    drop_after: Option<u64>,
    seed: u64,
    out: &Path,
    log: &mut dyn Write,
) -> Result<EvalTable> {
    let tasks = with_drop(parse_suite(suite)?, drop_after);
    let world = cfg.data.episode.world;
    let table = with_loop(cfg, planner, policy, |pl, ex| {
        evaluate(pl, ex, &tasks, &world, cfg.trials, cfg.r, &cfg.limits, seed)
    })?;
    let mut w = create(out)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    table.write_csv(log)?;
    Ok(table)
}

/// Runs the checks and prints one row per block. The caller decides the
/// exit status from the reports.
pub fn cmd_gradcheck(
    block: Option<&str>,
    seed: u64,
    log: &mut dyn Write,
) -> Result<Vec<GradcheckReport>> {
    let reports = match block {
        Some(b) => vec![gradcheck_block(b, seed)?],
        None => gradcheck_all(seed)?,
    };
    writeln!(
        log,
        "{:<16} {:>14} {:>7} status",
        "block", "max_rel_error", "probes"
    )?;
    for r in &reports {
        writeln!(
            log,
            "{:<16} {:>14.3e} {:>7} {}",
            r.block,
            r.max_rel_error,
            r.probes,
            if r.passed() { "pass" } else { "FAIL" }
        )?;
    }
    Ok(reports)
}

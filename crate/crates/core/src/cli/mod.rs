//! Command-line front end: argument parsing, configuration layering and
//! exit codes.

pub mod commands;
pub mod config;
pub mod svg;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_rollout, cmd_sample, cmd_train, cmd_train_policy,
    load_planner_arg, load_policy_arg, parse_suite, PlannerArg, PolicyArg,
};
pub use config::{Config, CONFIG_KEYS};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Numerical failures exit with 3, everything else with 2.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::Diverged { .. } => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "flowplan",
    version,
    about = "Keypoint flow planning: data generation, planner and policy training, sampling and closed-loop evaluation",
    after_help = "Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical failure.\nConfiguration: flat `key = value` files via --config, single keys via --set; explicit flags win."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// INI-style `key = value` file; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set t_max=50` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic demonstration dataset.
    #[command(
        after_help = "Tasks: pick-place (alias nominal), distractor, all, or comma-separated task ids (0 pick-place, 1 and 2 distractor)."
    )]
    GenData(GenDataArgs),
    /// Train the flow planner.
    #[command(
        after_help = "Metrics CSV columns: step,loss_total,loss_diff,loss_align,loss_smooth,grad_norm (one row per step)."
    )]
    Train(TrainArgs),
    /// Train the flow-conditioned policy by behavior cloning.
    #[command(
        after_help = "Metrics CSV columns: step,loss_total,loss_mse,loss_bce,grad_norm (one row per step)."
    )]
    TrainPolicy(TrainPolicyArgs),
    /// Sample one flow for a dataset condition and plot it.
    Sample(SampleArgs),
    /// Run one closed-loop episode and write its trace.
    #[command(
        after_help = "Trace lines: step gripper_open held_object x y z plan_id, then x y z per object."
    )]
    Rollout(RolloutArgs),
    /// Evaluate success rates over seeded trials.
    #[command(
        after_help = "CSV columns: task_id,trials,successes,success_rate; a final `average` row holds the totals and the mean per-task rate."
    )]
    Eval(EvalArgs),
    /// Finite-difference gradient checks of the network blocks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "pick-place")]
    pub task: String,
    #[arg(long, default_value_t = 200)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV path [default: OUT with extension .csv].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainPolicyArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Planner checkpoint; required with `flow_source = planner`.
    #[arg(long)]
    pub planner: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV path [default: OUT with extension .csv].
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Train the baseline that sees zeros instead of the flow embedding.
    #[arg(long)]
    pub no_flow: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub planner: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Flow file path.
    #[arg(long)]
    pub out: PathBuf,
    /// SVG path [default: OUT with extension .svg].
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct LoopArgs {
    /// Planner checkpoint, or `oracle`.
    #[arg(long)]
    pub planner: String,
    /// Policy checkpoint, or `expert`.
    #[arg(long)]
    pub policy: String,
    /// Chunks per plan.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Break the grasp this many steps after it is made.
    #[arg(long)]
    pub drop_after: Option<u64>,
    /// Keep the first plan for the whole episode.
    #[arg(long)]
    pub open_loop: bool,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub lp: LoopArgs,
    #[arg(long, default_value = "pick-place")]
    pub task: String,
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub lp: LoopArgs,
    #[arg(long, default_value = "nominal")]
    pub suite: String,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("which").required(true).args(["all", "block"])))]
pub struct GradcheckArgs {
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub block: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// The file config, then `--set` pairs.
pub fn layered_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--set expects KEY=VALUE, got {kv:?}"))
        })?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn or_ext(p: &Option<PathBuf>, out: &Path, ext: &str) -> PathBuf {
    p.clone().unwrap_or_else(|| out.with_extension(ext))
}

fn apply_loop(cfg: &mut Config, lp: &LoopArgs) -> Result<(PlannerArg, PolicyArg, u64)> {
    if let Some(r) = lp.r {
        cfg.r = r;
    }
    if lp.open_loop {
        cfg.limits.replan = false;
    }
    Ok((
        load_planner_arg(&lp.planner)?,
        load_policy_arg(&lp.policy)?,
        lp.seed.unwrap_or(cfg.seed),
    ))
}

/// Runs a parsed command and returns its exit code.
pub fn run(cli: Cli, log: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = layered_config(&a.common)?;
            cmd_gen_data(
                &cfg,
                &a.task,
                a.episodes,
                a.seed.unwrap_or(cfg.seed),
                &a.out,
                log,
            )?;
        }
        Command::Train(a) => {
            let mut cfg = layered_config(&a.common)?;
            if let Some(s) = a.steps {
                cfg.train.steps = s;
            }
            cmd_train(
                &cfg,
                &a.dataset,
                a.seed.unwrap_or(cfg.seed),
                &a.out,
                &or_ext(&a.metrics, &a.out, "csv"),
                log,
            )?;
        }
        Command::TrainPolicy(a) => {
            let mut cfg = layered_config(&a.common)?;
            if let Some(s) = a.steps {
                cfg.policy_train.steps = s;
            }
            if a.no_flow {
                cfg.policy.use_flow = false;
            }
            let metrics = or_ext(&a.metrics, &a.out, "csv");
            cmd_train_policy(
                &cfg,
                &a.dataset,
                a.planner.as_deref(),
                a.seed.unwrap_or(cfg.seed),
                &a.out,
                &metrics,
                log,
            )?;
        }
        Command::Sample(a) => {
            let cfg = layered_config(&a.common)?;
            let svg = or_ext(&a.svg, &a.out, "svg");
            cmd_sample(
                &cfg,
                &a.planner,
                &a.dataset,
                a.index,
                a.seed.unwrap_or(cfg.seed),
                &a.out,
                &svg,
                log,
            )?;
        }
        Command::Rollout(a) => {
            let mut cfg = layered_config(&a.common)?;
            let (pl, po, seed) = apply_loop(&mut cfg, &a.lp)?;
            cmd_rollout(
                &cfg,
                &pl,
                &po,
                &a.task,
                a.lp.drop_after,
                seed,
                &a.trace,
                log,
            )?;
        }
        Command::Eval(a) => {
            let mut cfg = layered_config(&a.common)?;
            if let Some(t) = a.trials {
                cfg.trials = t;
            }
            let (pl, po, seed) = apply_loop(&mut cfg, &a.lp)?;
            cmd_eval(&cfg, &pl, &po, &a.suite, a.lp.drop_after, seed, &a.out, log)?;
        }
        Command::Gradcheck(a) => {
            let reports =
                cmd_gradcheck(if a.all { None } else { a.block.as_deref() }, a.seed, log)?;
            if reports.iter().any(|r| !r.passed()) {
                return Ok(EXIT_NUMERICAL);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` and runs the command. Usage errors exit with 1; `--help`
/// and `--version` print to stdout and exit with 0.
pub fn main_with_args<I, S>(args: I, log: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(log, "{text}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        EXIT_USAGE
                    } else {
                        EXIT_OK
                    }
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli, log) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

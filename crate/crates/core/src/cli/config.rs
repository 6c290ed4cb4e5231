//! Flat `key = value` configuration covering every tunable default.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::closedloop::LoopLimits;
use crate::datagen::DatagenConfig;
use crate::diffusion::{SampleConfig, ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::net::NetConfig;
use crate::policy::train::{FlowSource, PolicyTrainConfig};
use crate::policy::PolicyConfig;

/// Recognized keys, each with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed"),
    ("k", "keyframes per flow"),
    ("n", "keypoints per flow"),
    ("gamma", "keyframe spacing exponent"),
    ("horizon", "action chunk length H"),
    ("pairs_per_segment", "training pairs per atomic segment"),
    ("persistence", "gripper debounce length"),
    ("min_len", "shortest atomic segment"),
    ("stale_chunks", "policy samples per pair"),
    ("static_threshold", "track filter: minimum path length"),
    ("outlier_mad_k", "track filter: MAD multiplier"),
    ("delta_max", "track filter: largest single-step move"),
    ("jitter_rate", "gripper signal flip probability"),
    ("episode_max_steps", "expert step budget per episode"),
    ("hold_steps", "steps recorded after the expert finishes"),
    ("drop_rate", "fraction of episodes with a grasp drop"),
    ("grasp_radius", "world: grasp distance"),
    ("max_step", "world: largest gripper move per step"),
    ("goal_tolerance", "world: success distance"),
    ("arena_lo", "world: lower arena bound"),
    ("arena_hi", "world: upper arena bound"),
    ("rest_height", "world: object height on the table"),
    ("c", "planner width"),
    ("heads", "planner attention heads"),
    ("n_local", "local context tokens"),
    ("n_3d", "resampler queries"),
    ("dit_depth", "denoiser blocks"),
    ("resampler_blocks", "resampler blocks"),
    ("cross_blocks", "denoiser blocks with cross-attention"),
    ("feat_tokens", "featurizer tokens"),
    ("mlp_ratio", "feed-forward expansion"),
    ("d_teacher", "teacher embedding width"),
    ("frame_first", "frame-axis attention first (bool)"),
    ("steps", "planner training steps"),
    ("batch", "planner batch size"),
    ("lr", "planner learning rate"),
    ("t_max", "diffusion steps T"),
    ("schedule", "cosine or linear"),
    ("lambda_align", "alignment loss weight"),
    ("lambda_smooth", "smoothness loss weight"),
    ("charbonnier_eps", "smoothness loss epsilon"),
    ("p_uncond", "condition dropout probability"),
    ("guidance_w", "classifier-free guidance weight"),
    (
        "holdout_every",
        "exclude every n-th pair from training (0 = none)",
    ),
    ("sample_steps", "sampler steps"),
    ("clamp", "bound on the normalized clean estimate"),
    ("c_cond", "policy flow-condition width"),
    ("c_base", "policy base-condition width"),
    ("hidden", "policy head width"),
    ("policy_heads", "policy pooling heads"),
    ("frame_dim", "policy frame-index encoding width"),
    ("task_dim", "policy task embedding width"),
    ("action_scale", "policy displacement unit"),
    ("use_flow", "condition the policy on flows (bool)"),
    ("policy_steps", "policy training steps"),
    ("policy_batch", "policy batch size"),
    ("policy_lr", "policy learning rate"),
    ("flow_source", "policy training flows: target or planner"),
    ("r", "chunks per plan"),
    ("max_plans", "plan limit per rollout"),
    ("max_steps", "world step limit per rollout"),
    ("replan", "refresh plans (bool)"),
    ("trials", "rollouts per task in eval"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub net: NetConfig,
    pub data: DatagenConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub policy: PolicyConfig,
    pub policy_train: PolicyTrainConfig,
    pub limits: LoopLimits,
    pub r: usize,
    pub trials: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            net: NetConfig::default(),
            data: DatagenConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            policy: PolicyConfig::default(),
            policy_train: PolicyTrainConfig::default(),
            limits: LoopLimits::default(),
            r: 2,
            trials: 20,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl Config {
    /// Sets one key. Shared quantities (K, N, H, T, guidance) are written
    /// to every module that reads them.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let f = || parse::<f64>(key, v);
        let u = || parse::<usize>(key, v);
        let ep = &mut self.data.episode;
        let pc = &mut self.data.pairs;
        let w = &mut ep.world;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "k" => {
                let k = u()?;
                (self.net.k, pc.k, self.policy.k) = (k, k, k);
            }
            "n" => {
                let n = u()?;
                (self.net.n, ep.n_keypoints, self.policy.n) = (n, n, n);
            }
            "gamma" => pc.gamma = f()?,
            "horizon" => {
                let h = u()?;
                (pc.horizon, self.policy.horizon) = (h, h);
            }
            "pairs_per_segment" => pc.pairs_per_segment = u()?,
            "persistence" => pc.persistence = u()?,
            "min_len" => pc.min_len = u()?,
            "stale_chunks" => pc.stale_chunks = u()?,
            "static_threshold" => pc.filter.static_threshold = f()?,
            "outlier_mad_k" => pc.filter.outlier_mad_k = f()?,
            "delta_max" => pc.filter.delta_max = f()?,
            "jitter_rate" => ep.jitter_rate = f()?,
            "episode_max_steps" => ep.max_steps = u()?,
            "hold_steps" => ep.hold_steps = u()?,
            "drop_rate" => self.data.drop_rate = f()?,
            "grasp_radius" => w.grasp_radius = f()?,
            "max_step" => w.max_step = f()?,
            "goal_tolerance" => w.goal_tolerance = f()?,
            "arena_lo" => w.arena_lo = f()?,
            "arena_hi" => w.arena_hi = f()?,
            "rest_height" => w.rest_height = f()?,
            "c" => self.net.c = u()?,
            "heads" => self.net.heads = u()?,
            "n_local" => self.net.n_local = u()?,
            "n_3d" => self.net.n_3d = u()?,
            "dit_depth" => self.net.dit_depth = u()?,
            "resampler_blocks" => self.net.resampler_blocks = u()?,
            "cross_blocks" => self.net.cross_blocks = u()?,
            "feat_tokens" => self.net.feat_tokens = u()?,
            "mlp_ratio" => self.net.mlp_ratio = u()?,
            "d_teacher" => self.net.d_teacher = u()?,
            "frame_first" => self.net.frame_first = parse_bool(key, v)?,
            "steps" => self.train.steps = u()?,
            "batch" => self.train.batch = u()?,
            "lr" => self.train.lr = f()?,
            "t_max" => {
                let t = u()?;
                (self.train.t_max, self.policy_train.t_max) = (t, t);
            }
            "schedule" => {
                self.train.schedule = match v {
                    "cosine" => ScheduleKind::Cosine,
                    "linear" => ScheduleKind::Linear,
                    _ => {
                        return Err(Error::InvalidArgument(format!(
                            "schedule: expected cosine or linear, got {v:?}"
                        )))
                    }
                }
            }
            "lambda_align" => self.train.weights.lambda_align = f()?,
            "lambda_smooth" => self.train.weights.lambda_smooth = f()?,
            "charbonnier_eps" => self.train.weights.charbonnier_eps = f()?,
            "p_uncond" => self.train.weights.p_uncond = f()?,
            "guidance_w" => {
                let g = f()?;
                (
                    self.train.weights.guidance_w,
                    self.sample.guidance_w,
                    self.policy_train.sample.guidance_w,
                ) = (g, g, g);
            }
            "holdout_every" => self.train.holdout_every = u()?,
            "sample_steps" => {
                let s = u()?;
                (self.sample.steps, self.policy_train.sample.steps) = (s, s);
            }
            "clamp" => {
                let c = f()?;
                (self.sample.clamp, self.policy_train.sample.clamp) = (c, c);
            }
            "c_cond" => self.policy.c_cond = u()?,
            "c_base" => self.policy.c_base = u()?,
            "hidden" => self.policy.hidden = u()?,
            "policy_heads" => self.policy.heads = u()?,
            "frame_dim" => self.policy.frame_dim = u()?,
            "task_dim" => self.policy.task_dim = u()?,
            "action_scale" => self.policy.action_scale = f()?,
            "use_flow" => self.policy.use_flow = parse_bool(key, v)?,
            "policy_steps" => self.policy_train.steps = u()?,
            "policy_batch" => self.policy_train.batch = u()?,
            "policy_lr" => self.policy_train.lr = f()?,
            "flow_source" => self.policy_train.source = v.parse::<FlowSource>()?,
            "r" => self.r = u()?,
            "max_plans" => self.limits.max_plans = u()?,
            "max_steps" => self.limits.max_steps = parse(key, v)?,
            "replan" => self.limits.replan = parse_bool(key, v)?,
            "trials" => self.trials = u()?,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown config key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses an INI-style document: `key = value` lines, `#` or `;`
    /// comments (whole-line or trailing), optional `[section]` headers (ignored). A key may appear
    /// only once.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line {}: expected key = value", i + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "config line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::InvalidArgument(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Writes every key with its current value, parseable by [`Config::parse_str`].
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        for (key, _) in CONFIG_KEYS {
            s.push_str(&format!("{key} = {}\n", self.get(key)));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        let ep = &self.data.episode;
        let pc = &self.data.pairs;
        let w = &ep.world;
        let lw = &self.train.weights;
        match key {
            "seed" => self.seed.to_string(),
            "k" => self.net.k.to_string(),
            "n" => self.net.n.to_string(),
            "gamma" => pc.gamma.to_string(),
            "horizon" => pc.horizon.to_string(),
            "pairs_per_segment" => pc.pairs_per_segment.to_string(),
            "persistence" => pc.persistence.to_string(),
            "min_len" => pc.min_len.to_string(),
            "stale_chunks" => pc.stale_chunks.to_string(),
            "static_threshold" => pc.filter.static_threshold.to_string(),
            "outlier_mad_k" => pc.filter.outlier_mad_k.to_string(),
            "delta_max" => pc.filter.delta_max.to_string(),
            "jitter_rate" => ep.jitter_rate.to_string(),
            "episode_max_steps" => ep.max_steps.to_string(),
            "hold_steps" => ep.hold_steps.to_string(),
            "drop_rate" => self.data.drop_rate.to_string(),
            "grasp_radius" => w.grasp_radius.to_string(),
            "max_step" => w.max_step.to_string(),
            "goal_tolerance" => w.goal_tolerance.to_string(),
            "arena_lo" => w.arena_lo.to_string(),
            "arena_hi" => w.arena_hi.to_string(),
            "rest_height" => w.rest_height.to_string(),
            "c" => self.net.c.to_string(),
            "heads" => self.net.heads.to_string(),
            "n_local" => self.net.n_local.to_string(),
            "n_3d" => self.net.n_3d.to_string(),
            "dit_depth" => self.net.dit_depth.to_string(),
            "resampler_blocks" => self.net.resampler_blocks.to_string(),
            "cross_blocks" => self.net.cross_blocks.to_string(),
            "feat_tokens" => self.net.feat_tokens.to_string(),
            "mlp_ratio" => self.net.mlp_ratio.to_string(),
            "d_teacher" => self.net.d_teacher.to_string(),
            "frame_first" => self.net.frame_first.to_string(),
            "steps" => self.train.steps.to_string(),
            "batch" => self.train.batch.to_string(),
            "lr" => self.train.lr.to_string(),
            "t_max" => self.train.t_max.to_string(),
            "schedule" => match self.train.schedule {
                ScheduleKind::Cosine => "cosine".into(),
                ScheduleKind::Linear => "linear".into(),
            },
            "lambda_align" => lw.lambda_align.to_string(),
            "lambda_smooth" => lw.lambda_smooth.to_string(),
            "charbonnier_eps" => lw.charbonnier_eps.to_string(),
            "p_uncond" => lw.p_uncond.to_string(),
            "guidance_w" => lw.guidance_w.to_string(),
            "holdout_every" => self.train.holdout_every.to_string(),
            "sample_steps" => self.sample.steps.to_string(),
            "clamp" => self.sample.clamp.to_string(),
            "c_cond" => self.policy.c_cond.to_string(),
            "c_base" => self.policy.c_base.to_string(),
            "hidden" => self.policy.hidden.to_string(),
            "policy_heads" => self.policy.heads.to_string(),
            "frame_dim" => self.policy.frame_dim.to_string(),
            "task_dim" => self.policy.task_dim.to_string(),
            "action_scale" => self.policy.action_scale.to_string(),
            "use_flow" => self.policy.use_flow.to_string(),
            "policy_steps" => self.policy_train.steps.to_string(),
            "policy_batch" => self.policy_train.batch.to_string(),
            "policy_lr" => self.policy_train.lr.to_string(),
            "flow_source" => match self.policy_train.source {
                FlowSource::Target => "target".into(),
                FlowSource::Planner => "planner".into(),
            },
            "r" => self.r.to_string(),
            "max_plans" => self.limits.max_plans.to_string(),
            "max_steps" => self.limits.max_steps.to_string(),
            "replan" => self.limits.replan.to_string(),
            "trials" => self.trials.to_string(),
            _ => String::new(),
        }
    }

    /// Checks every module's constraints.
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        self.data.episode.world.validate()?;
        let ep = &self.data.episode;
        let pc = &self.data.pairs;
        let bad = |what: &str| Err(Error::InvalidArgument(format!("invalid config: {what}")));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if pc.k < 2 {
            return bad("k must be at least 2");
        }
        if !(pc.gamma > 0.0 && pc.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if pc.pairs_per_segment == 0 || pc.persistence == 0 || pc.min_len == 0 || pc.horizon == 0 {
            return bad("pairs_per_segment, persistence, min_len and horizon must be at least 1");
        }
        let fc = &pc.filter;
        if !(fc.static_threshold >= 0.0 && fc.outlier_mad_k > 0.0 && fc.delta_max > 0.0) {
            return bad("track filter thresholds");
        }
        if ep.n_keypoints == 0
            || ep.max_steps == 0
            || !unit(ep.jitter_rate)
            || !unit(self.data.drop_rate)
        {
            return bad("episode settings");
        }
        if self.sample.steps == 0 || !(self.sample.clamp > 0.0) {
            return bad("sample_steps must be at least 1 and clamp positive");
        }
        if self.policy_train.batch == 0 || !(self.policy_train.lr > 0.0) {
            return bad("policy_batch must be at least 1 and policy_lr positive");
        }
        if self.r == 0 || self.limits.max_plans == 0 || self.limits.max_steps == 0 {
            return bad("r, max_plans and max_steps must be at least 1");
        }
        Ok(())
    }
}

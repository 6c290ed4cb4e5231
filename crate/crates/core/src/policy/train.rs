//! Behavior cloning of the policy with the planner frozen.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{init_policy, policy_vars, BaseState, PolicyCheckpoint, PolicyConfig};
use crate::datagen::Dataset;
use crate::diffusion::{build_schedule, sample_flows, Adam, SampleConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, FlowTensor};
use crate::net::{encode_condition, Checkpoint, ParamId, Real, Tape, Var};

pub const POLICY_METRICS_HEADER: &str = "step,loss_total,loss_mse,loss_bce,grad_norm";

/// Where the flow conditions of the training samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSource {
    /// Ground-truth flow targets.
    Target,
    /// Flows sampled from the frozen planner at each pair's condition.
    Planner,
}

impl std::str::FromStr for FlowSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(Self::Target),
            "planner" => Ok(Self::Planner),
            other => Err(Error::InvalidArgument(format!(
                "unknown flow source {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub source: FlowSource,
    /// Sampler settings for [`FlowSource::Planner`].
    pub sample: SampleConfig,
    /// Diffusion steps of the planner's schedule.
    pub t_max: usize,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 64,
            lr: 1e-3,
            source: FlowSource::Target,
            sample: SampleConfig::default(),
            t_max: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcSample {
    pub base: BaseState,
    /// Index into the flow list returned with the samples.
    pub flow: usize,
    pub target: ActionChunk,
}

/// One flow per pair and one sample per policy sample of each pair. With
/// [`FlowSource::Planner`] every pair's flow is sampled from `planner`.
pub fn build_bc_samples(
    ds: &Dataset,
    planner: Option<&Checkpoint>,
    source: FlowSource,
    sc: &SampleConfig,
    t_max: usize,
    seed: u64,
) -> Result<(Vec<FlowTensor>, Vec<BcSample>)> {
    let flows = match source {
        FlowSource::Target => ds.pairs.iter().map(|p| p.target.clone()).collect(),
        FlowSource::Planner => {
            let ck = planner.ok_or_else(|| {
                Error::InvalidArgument("planner flows need a planner checkpoint".into())
            })?;
            let sched = build_schedule(t_max, ScheduleKind::Cosine)?;
            let mut flows = Vec::with_capacity(ds.len());
            for (i, chunk) in ds.pairs.chunks(32).enumerate() {
                let conds = chunk
                    .iter()
                    .map(|p| {
                        encode_condition(
                            &ck.store,
                            &ck.cfg,
                            &p.observation,
                            p.task_id,
                            p.query_points.as_deref(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                flows.extend(sample_flows(
                    ck,
                    &conds,
                    &sched,
                    sc,
                    seed.wrapping_add(i as u64),
                )?);
            }
            flows
        }
    };
    let mut samples = Vec::new();
    for (i, p) in ds.pairs.iter().enumerate() {
        for s in &p.policy_samples {
            samples.push(BcSample {
                base: BaseState {
                    observation: s.observation,
                    task_id: p.task_id,
                    proprio: s.proprio,
                },
                flow: i,
                target: s.chunk.clone(),
            });
        }
    }
    Ok((flows, samples))
}

#[derive(Debug, Clone, Copy)]
pub struct BcVars {
    pub total: Var,
    pub mse: Var,
    pub bce: Var,
}

/// Mean squared displacement error in `action_scale` units plus mean
/// binary cross-entropy of the gripper channel.
pub fn bc_loss_graph<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &PolicyConfig,
    base: &[BaseState],
    flows: &[&FlowTensor],
    targets: &[&ActionChunk],
) -> Result<BcVars> {
    let b = base.len();
    let h = cfg.horizon;
    if targets.len() != b || targets.iter().any(|c| c.horizon() != h) {
        return Err(Error::Shape {
            op: "bc_loss",
            detail: format!("{} targets for {b} states at H={h}", targets.len()),
        });
    }
    let (disp, grip) = policy_vars(t, cfg, base, flows)?;
    let mut dt = Array2::zeros((b, 3 * h));
    let mut gt = Array2::zeros((b, h));
    for (i, c) in targets.iter().enumerate() {
        for s in 0..h {
            for a in 0..3 {
                dt[[i, 3 * s + a]] = c.deltas[s][a] / cfg.action_scale;
            }
            gt[[i, s]] = if c.gripper[s] > 0.5 { 1.0 } else { 0.0 };
        }
    }
    let dt = t.input_f64(&dt)?;
    let diff = t.sub(disp, dt)?;
    let mse = t.row_weighted_sq(diff, vec![1.0 / (b * 3 * h) as f64; b])?;
    let bce = t.bce_logits(grip, gt)?;
    let bce = t.scale(bce, 1.0 / (b * h) as f64)?;
    let total = t.add(mse, bce)?;
    Ok(BcVars { total, mse, bce })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrainReport {
    /// `(total, mse, bce, grad_norm)` per step.
    pub history: Vec<[f64; 4]>,
}

impl PolicyTrainReport {
    pub fn head_mean(&self, n: usize) -> f64 {
        let h = &self.history[..n.min(self.history.len())];
        h.iter().map(|r| r[0]).sum::<f64>() / h.len().max(1) as f64
    }

    pub fn tail_mean(&self, n: usize) -> f64 {
        let h = &self.history[self.history.len().saturating_sub(n)..];
        h.iter().map(|r| r[0]).sum::<f64>() / h.len().max(1) as f64
    }
}

/// Trains a policy from scratch on the pairs of `ds`. The planner is only
/// read. Deterministic in `seed`.
pub fn bc_train(
    ds: &Dataset,
    planner: Option<&Checkpoint>,
    cfg: &PolicyConfig,
    tc: &PolicyTrainConfig,
    seed: u64,
    mut metrics: Option<&mut dyn Write>,
) -> Result<(PolicyCheckpoint, PolicyTrainReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if tc.batch == 0 || !(tc.lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid policy training config {tc:?}"
        )));
    }
    if ds.k != cfg.k || ds.n != cfg.n || ds.horizon != cfg.horizon {
        return Err(Error::ConfigMismatch(format!(
            "dataset K={} N={} H={} vs policy K={} N={} H={}",
            ds.k, ds.n, ds.horizon, cfg.k, cfg.n, cfg.horizon
        )));
    }
    let (flows, samples) =
        build_bc_samples(ds, planner, tc.source, &tc.sample, tc.t_max, seed ^ 0x91a4)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut store = init_policy(cfg, seed)?;
    let mut opt = Adam::new(&store, tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbc);
    let mut report = PolicyTrainReport {
        history: Vec::with_capacity(tc.steps),
    };
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{POLICY_METRICS_HEADER}")?;
    }
    for step in 0..tc.steps {
        let pick: Vec<&BcSample> = (0..tc.batch)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let base: Vec<BaseState> = pick.iter().map(|s| s.base).collect();
        let fl: Vec<&FlowTensor> = pick.iter().map(|s| &flows[s.flow]).collect();
        let tg: Vec<&ActionChunk> = pick.iter().map(|s| &s.target).collect();
        let run = || -> Result<([f64; 3], Vec<(ParamId, Array2<f64>)>)> {
            let mut t = Tape::<f32>::new(&store);
            let v = bc_loss_graph(&mut t, cfg, &base, &fl, &tg)?;
            let s = |v: Var| t.value(v)[[0, 0]].f64();
            let parts = [s(v.total), s(v.mse), s(v.bce)];
            let g = t.backward(v.total)?;
            Ok((parts, g.params(&t)))
        };
        let (parts, grads) = run().map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let norm = opt.update(&mut store, &grads);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "gradient norm is not finite".into(),
            });
        }
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{step},{},{},{},{norm}", parts[0], parts[1], parts[2])?;
        }
        report.history.push([parts[0], parts[1], parts[2], norm]);
    }
    Ok((
        PolicyCheckpoint {
            cfg: cfg.clone(),
            store,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::world::TaskSpec;
    use crate::datagen::{generate_dataset, DatagenConfig, PairConfig};

    fn tiny_ds() -> Dataset {
        let cfg = DatagenConfig {
            pairs: PairConfig {
                k: 3,
                horizon: 3,
                pairs_per_segment: 2,
                ..PairConfig::default()
            },
            episode: crate::datagen::EpisodeConfig {
                n_keypoints: 2,
                ..Default::default()
            },
            ..DatagenConfig::default()
        };
        generate_dataset(&[TaskSpec::pick_place()], 2, 5, &cfg).unwrap()
    }

    #[test]
    fn zero_steps_leaves_init() {
        let ds = tiny_ds();
        let cfg = PolicyConfig::tiny();
        let tc = PolicyTrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (ck, rep) = bc_train(&ds, None, &cfg, &tc, 3, None).unwrap();
        assert_eq!(ck.store, init_policy(&cfg, 3).unwrap());
        assert!(rep.history.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let ds = tiny_ds();
        let cfg = PolicyConfig::tiny();
        let tc = PolicyTrainConfig {
            steps: 150,
            batch: 8,
            lr: 3e-3,
            ..Default::default()
        };
        let (a, ra) = bc_train(&ds, None, &cfg, &tc, 3, None).unwrap();
        let (b, _) = bc_train(&ds, None, &cfg, &tc, 3, None).unwrap();
        assert_eq!(a, b);
        assert!(ra.tail_mean(20) < ra.head_mean(20));
    }

    #[test]
    fn planner_source_needs_a_planner() {
        let ds = tiny_ds();
        let tc = PolicyTrainConfig {
            steps: 1,
            source: FlowSource::Planner,
            ..Default::default()
        };
        assert!(bc_train(&ds, None, &PolicyConfig::tiny(), &tc, 1, None).is_err());
        assert!(bc_train(
            &ds,
            None,
            &PolicyConfig::default(),
            &PolicyTrainConfig::default(),
            1,
            None
        )
        .is_err());
    }
}

//! Adam trainer for the planner.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{total_loss, Example, LossParts};
use super::{build_schedule, LossWeights, ScheduleKind};
use crate::datagen::{Dataset, TrainingPair};
use crate::error::{Error, Result};
use crate::net::{init_params, Checkpoint, NetConfig, ParamId, ParamStore};

pub const METRICS_HEADER: &str = "step,loss_total,loss_diff,loss_align,loss_smooth,grad_norm";

/// Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = |id: ParamId| Array2::zeros(store.value(id).dim());
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// Clips `grads` to global norm [`Adam::clip`] and applies one update to
    /// every non-frozen parameter. Returns the pre-clip norm.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)]) -> f64 {
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let factor = if norm > self.clip {
            self.clip / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.value_mut(*id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * factor;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
        norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub t_max: usize,
    pub schedule: ScheduleKind,
    pub weights: LossWeights,
    /// Every n-th pair (by index) is excluded from training.
    pub holdout_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            t_max: 100,
            schedule: ScheduleKind::Cosine,
            weights: LossWeights::default(),
            holdout_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch == 0 || self.t_max == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid training config {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<(LossParts, f64)>,
}

impl TrainReport {
    pub fn first(&self) -> Option<LossParts> {
        self.history.first().map(|h| h.0)
    }

    /// Mean total loss over the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        tail.iter().map(|h| h.0.total).sum::<f64>() / tail.len().max(1) as f64
    }

    /// Mean total loss over the first `n` steps.
    pub fn head_mean(&self, n: usize) -> f64 {
        let head = &self.history[..n.min(self.history.len())];
        head.iter().map(|h| h.0.total).sum::<f64>() / head.len().max(1) as f64
    }
}

/// Pairs used for training under `holdout_every` (all when it is 0).
pub fn training_pairs<'a>(ds: &'a Dataset, holdout_every: usize) -> Vec<&'a TrainingPair> {
    if holdout_every == 0 {
        ds.pairs.iter().collect()
    } else {
        ds.split_holdout(holdout_every).0
    }
}

/// Trains a planner from scratch. Single-threaded and deterministic in
/// `seed`. When `metrics` is given, one CSV row is written per step.
pub fn train(
    ds: &Dataset,
    cfg: &NetConfig,
    tc: &TrainConfig,
    seed: u64,
    metrics: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainReport)> {
    let store = init_params(cfg, seed)?;
    train_from(ds, cfg, tc, seed, store, metrics)
}

pub fn train_from(
    ds: &Dataset,
    cfg: &NetConfig,
    tc: &TrainConfig,
    seed: u64,
    mut store: ParamStore,
    mut metrics: Option<&mut dyn Write>,
) -> Result<(Checkpoint, TrainReport)> {
    tc.validate()?;
    if ds.k != cfg.k || ds.n != cfg.n {
        return Err(Error::ConfigMismatch(format!(
            "dataset K={} N={} vs network K={} N={}",
            ds.k, ds.n, cfg.k, cfg.n
        )));
    }
    let pairs = training_pairs(ds, tc.holdout_every);
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sched = build_schedule(tc.t_max, tc.schedule)?;
    let examples = pairs
        .iter()
        .map(|p| Example::from_pair(p, &ds.stats, &store))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a1a);
    let mut opt = Adam::new(&store, tc.lr);
    let mut report = TrainReport {
        history: Vec::with_capacity(tc.steps),
    };
    if let Some(w) = metrics.as_deref_mut() {
        writeln!(w, "{METRICS_HEADER}")?;
    }
    for step in 0..tc.steps {
        let batch: Vec<Example> = (0..tc.batch)
            .map(|_| examples[rng.random_range(0..examples.len())].clone())
            .collect();
        let (parts, grads) =
            total_loss::<f32, _>(&store, cfg, &batch, &tc.weights, &sched, &mut rng).map_err(
                |e| Error::Diverged {
                    step,
                    detail: e.to_string(),
                },
            )?;
        let norm = opt.update(&mut store, &grads);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "gradient norm is not finite".into(),
            });
        }
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(
                w,
                "{step},{},{},{},{},{norm}",
                parts.total, parts.diff, parts.align, parts.smooth
            )?;
        }
        report.history.push((parts, norm));
    }
    Ok((
        Checkpoint {
            cfg: cfg.clone(),
            store,
            stats: ds.stats,
        },
        report,
    ))
}

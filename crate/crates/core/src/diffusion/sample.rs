//! Deterministic DDIM-style sampler with classifier-free guidance.

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{cfg_combine, implied_noise, recover_x0, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::flow::{denormalize, FlowTensor};
use crate::net::{denoise, Checkpoint, ConditionBundle, Real, Tape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_w: f64,
    /// Bound on `|x̂0|` in normalized units.
    pub clamp: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance_w: 2.0,
            clamp: 6.0,
        }
    }
}

/// Descending timesteps `T = τ_S > … > τ_1 ≥ 1`, evenly strided.
pub fn timestep_subset(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_max);
    let mut ts: Vec<usize> = (1..=steps)
        .rev()
        .map(|i| ((i * t_max) as f64 / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts
}

pub fn sample_flow(
    ck: &Checkpoint,
    cond: &ConditionBundle,
    sched: &DiffusionSchedule,
    sc: &SampleConfig,
    seed: u64,
) -> Result<FlowTensor> {
    Ok(sample_flows(ck, std::slice::from_ref(cond), sched, sc, seed)?.remove(0))
}

/// Samples one flow per condition in a single batch. The result is in
/// world coordinates.
pub fn sample_flows(
    ck: &Checkpoint,
    conds: &[ConditionBundle],
    sched: &DiffusionSchedule,
    sc: &SampleConfig,
    seed: u64,
) -> Result<Vec<FlowTensor>> {
    sample_flows_in::<f32>(ck, conds, sched, sc, seed)
}

pub fn sample_flows_in<T: Real>(
    ck: &Checkpoint,
    conds: &[ConditionBundle],
    sched: &DiffusionSchedule,
    sc: &SampleConfig,
    seed: u64,
) -> Result<Vec<FlowTensor>> {
    let cfg = &ck.cfg;
    let b = conds.len();
    if b == 0 || sc.steps == 0 {
        return Err(Error::InvalidArgument(
            "sampling needs at least one condition and one step".into(),
        ));
    }
    let (kn, c, nl) = (cfg.k * cfg.n, cfg.c, cfg.n_local);
    for cb in conds {
        if cb.fused.len() != cfg.cond_dim() || cb.context.dim() != (nl, c) {
            return Err(Error::ConfigMismatch(
                "condition bundle does not match the planner".into(),
            ));
        }
    }
    let guided = sc.guidance_w > 0.0;
    let branches = if guided { 2 } else { 1 };
    let null = ck.store.get("null_cond")?;
    let mut cond = Array2::zeros((branches * b, cfg.cond_dim()));
    let mut context = Array2::zeros((branches * b * nl, c));
    for (i, cb) in conds.iter().enumerate() {
        for br in 0..branches {
            let row = br * b + i;
            if br == 0 {
                cond.row_mut(row)
                    .assign(&ndarray::ArrayView1::from(&cb.fused));
            } else {
                cond.row_mut(row).assign(&null.row(0));
            }
            context
                .slice_mut(s![row * nl..(row + 1) * nl, ..])
                .assign(&cb.context);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            (0..kn * 3)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let taus = timestep_subset(sched.steps(), sc.steps);
    for (j, &tau) in taus.iter().enumerate() {
        let prev = taus.get(j + 1).copied().unwrap_or(0);
        let mut xt = Array2::zeros((branches * b * kn, 3));
        for br in 0..branches {
            for (i, xi) in x.iter().enumerate() {
                for r in 0..kn {
                    for a in 0..3 {
                        xt[[(br * b + i) * kn + r, a]] = xi[r * 3 + a];
                    }
                }
            }
        }
        let mut tape = Tape::<T>::new(&ck.store);
        let xv = tape.input_f64(&xt)?;
        let cv = tape.input_f64(&cond)?;
        let ctx = tape.input_f64(&context)?;
        let out = denoise(&mut tape, cfg, xv, &vec![tau; branches * b], cv, ctx)?;
        tape.check_finite(out)?;
        let out = tape.value(out);
        let (ab, ab_prev) = (sched.alpha_bar(tau), sched.alpha_bar(prev));
        for (i, xi) in x.iter_mut().enumerate() {
            let rows = |br: usize| -> Vec<f64> {
                out.slice(s![(br * b + i) * kn..(br * b + i + 1) * kn, ..])
                    .iter()
                    .map(|v| v.f64())
                    .collect()
            };
            let v = if guided {
                cfg_combine(&rows(0), &rows(1), sc.guidance_w)?
            } else {
                rows(0)
            };
            let x0: Vec<f64> = recover_x0(xi, &v, ab)?
                .into_iter()
                .map(|v| v.clamp(-sc.clamp, sc.clamp))
                .collect();
            let eps = implied_noise(xi, &v, ab)?;
            let (pa, ps) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
            *xi = x0
                .iter()
                .zip(&eps)
                .map(|(&x0, &e)| pa * x0 + ps * e)
                .collect();
        }
    }
    x.into_iter()
        .map(|values| {
            let f = FlowTensor::with_unit_weights(cfg.k, cfg.n, values)?;
            Ok(denormalize(&f, &ck.stats))
        })
        .collect()
}

//! Diffusion, alignment and smoothness losses, as plain functions and as
//! batched tape graphs.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{forward_diffuse, v_target, DiffusionSchedule, LossWeights};
use crate::closedloop::world::OBS_DIM;
use crate::datagen::TrainingPair;
use crate::error::{Error, Result};
use crate::flow::{normalize, NormStats};
use crate::net::model::{apply_null_cond, teacher_embedding};
use crate::net::{denoise, encode_condition_vars, NetConfig, ParamId, ParamStore, Real, Tape, Var};

/// `(1/Σw) Σ w_i ‖v_pred_i - v_target_i‖²` over points `i` (3 values each).
pub fn loss_diff(v_pred: &[f64], v_target: &[f64], weights: &[f64]) -> Result<f64> {
    if v_pred.len() != v_target.len() || v_pred.len() != 3 * weights.len() {
        return Err(Error::Shape {
            op: "loss_diff",
            detail: format!("{} / {} / {}", v_pred.len(), v_target.len(), weights.len()),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::NoVisiblePoints);
    }
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let sq: f64 = (0..3)
            .map(|a| (v_pred[3 * i + a] - v_target[3 * i + a]).powi(2))
            .sum();
        acc += w * sq;
    }
    Ok(acc / total)
}

/// Charbonnier penalty on second temporal differences of a `k × n` flow,
/// normalized by the summed weight of the interior keyframes. Zero when
/// `k < 3`.
pub fn loss_smooth(x0: &[f64], k: usize, n: usize, weights: &[f64], eps: f64) -> Result<f64> {
    if x0.len() != k * n * 3 || weights.len() != k * n {
        return Err(Error::Shape {
            op: "loss_smooth",
            detail: format!("{} values, {} weights for {k}x{n}", x0.len(), weights.len()),
        });
    }
    if k < 3 {
        return Ok(0.0);
    }
    let (mut acc, mut total) = (0.0, 0.0);
    for kk in 1..k - 1 {
        for nn in 0..n {
            let w = weights[kk * n + nn];
            total += w;
            if w == 0.0 {
                continue;
            }
            let at = |k: usize, a: usize| x0[(k * n + nn) * 3 + a];
            let sq: f64 = (0..3)
                .map(|a| (at(kk + 1, a) - 2.0 * at(kk, a) + at(kk - 1, a)).powi(2))
                .sum();
            acc += w * (sq + eps * eps).sqrt();
        }
    }
    if total <= 0.0 {
        return Err(Error::NoVisiblePoints);
    }
    Ok(acc / total)
}

/// `‖g_φ(c_3d) - h‖²` with the projector read from `store`.
pub fn loss_align(store: &ParamStore, c3d: &[f64], h: &[f64]) -> Result<f64> {
    let w = store.get("align.proj.w")?;
    let b = store.get("align.proj.b")?;
    if c3d.len() != w.nrows() || h.len() != w.ncols() {
        return Err(Error::Shape {
            op: "loss_align",
            detail: format!("c3d {}, h {}, proj {:?}", c3d.len(), h.len(), w.dim()),
        });
    }
    Ok((0..w.ncols())
        .map(|j| {
            let p: f64 = b[[0, j]] + (0..w.nrows()).map(|i| c3d[i] * w[[i, j]]).sum::<f64>();
            (p - h[j]).powi(2)
        })
        .sum())
}

/// One training example in normalized flow coordinates.
#[derive(Debug, Clone)]
pub struct Example<'a> {
    pub x0: Vec<f64>,
    pub weights: Vec<f64>,
    pub obs: [f64; OBS_DIM],
    pub task_id: usize,
    pub query: Option<&'a [[f64; 2]]>,
    pub teacher: Vec<f64>,
}

impl<'a> Example<'a> {
    pub fn from_pair(
        pair: &'a TrainingPair,
        stats: &NormStats,
        store: &ParamStore,
    ) -> Result<Self> {
        let x0 = normalize(&pair.target, stats);
        Ok(Self {
            x0: x0.values().to_vec(),
            weights: pair.target.weights().to_vec(),
            obs: pair.observation,
            task_id: pair.task_id,
            query: pair.query_points.as_deref(),
            teacher: teacher_embedding(store, &pair.observation)?,
        })
    }
}

/// Random draws for one batch: timesteps, noise, condition dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct Draws {
    pub t: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
    pub drop: Vec<bool>,
}

impl Draws {
    pub fn sample<R: Rng>(
        rng: &mut R,
        batch: usize,
        values: usize,
        t_max: usize,
        p_uncond: f64,
    ) -> Self {
        let mut d = Draws {
            t: Vec::with_capacity(batch),
            eps: Vec::with_capacity(batch),
            drop: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            d.t.push(rng.random_range(1..=t_max));
            d.eps
                .push((0..values).map(|_| StandardNormal.sample(rng)).collect());
            d.drop
                .push(p_uncond > 0.0 && rng.random_bool(p_uncond.min(1.0)));
        }
        d
    }
}

pub type Batch<'a> = [Example<'a>];

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub diff: Var,
    pub align: Var,
    pub smooth: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub diff: f64,
    pub align: f64,
    pub smooth: f64,
}

/// Records the batch-averaged objective
/// `L_diff + λ_align L_align + λ_smooth L_smooth`.
pub fn loss_graph<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &NetConfig,
    batch: &Batch<'_>,
    draws: &Draws,
    sched: &DiffusionSchedule,
    lw: &LossWeights,
) -> Result<LossVars> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    let (k, n) = (cfg.k, cfg.n);
    let kn = k * n;
    let rows = b * kn;
    let inv_b = 1.0 / b as f64;
    let mut xt = Array2::zeros((rows, 3));
    let mut vt = Array2::zeros((rows, 3));
    let mut a_xt = Array2::zeros((rows, 3));
    let mut s_coef = Array2::zeros((rows, 3));
    let mut w_diff = vec![0.0; rows];
    let mut w_smooth = Vec::new();
    let (mut up, mut mid, mut down) = (Vec::new(), Vec::new(), Vec::new());
    for (i, ex) in batch.iter().enumerate() {
        if ex.x0.len() != kn * 3 || ex.weights.len() != kn {
            return Err(Error::Shape {
                op: "loss_graph",
                detail: format!("example {i} does not match K={k}, N={n}"),
            });
        }
        let ab = sched.alpha_bar(draws.t[i]);
        let x = forward_diffuse(&ex.x0, &draws.eps[i], ab)?;
        let v = v_target(&ex.x0, &draws.eps[i], ab)?;
        let sw: f64 = ex.weights.iter().sum();
        if sw <= 0.0 {
            return Err(Error::NoVisiblePoints);
        }
        for r in 0..kn {
            for a in 0..3 {
                xt[[i * kn + r, a]] = x[r * 3 + a];
                vt[[i * kn + r, a]] = v[r * 3 + a];
                a_xt[[i * kn + r, a]] = ab.sqrt() * x[r * 3 + a];
                s_coef[[i * kn + r, a]] = (1.0 - ab).sqrt();
            }
            w_diff[i * kn + r] = ex.weights[r] * inv_b / sw;
        }
        if k >= 3 {
            let interior: f64 = ex.weights[n..(k - 1) * n].iter().sum();
            if interior <= 0.0 {
                return Err(Error::NoVisiblePoints);
            }
            for kk in 1..k - 1 {
                for nn in 0..n {
                    let r = i * kn + kk * n + nn;
                    up.push(r + n);
                    mid.push(r);
                    down.push(r - n);
                    w_smooth.push(ex.weights[kk * n + nn] * inv_b / interior);
                }
            }
        }
    }

    let obs: Vec<[f64; OBS_DIM]> = batch.iter().map(|e| e.obs).collect();
    let tasks: Vec<usize> = batch.iter().map(|e| e.task_id).collect();
    let queries: Vec<Option<&[[f64; 2]]>> = batch.iter().map(|e| e.query).collect();
    let enc = encode_condition_vars(t, cfg, &obs, &tasks, &queries)?;
    let cond = apply_null_cond(t, enc.fused, &draws.drop)?;
    let xt_v = t.input_f64(&xt)?;
    let v_pred = denoise(t, cfg, xt_v, &draws.t, cond, enc.context)?;

    let vt_v = t.input_f64(&vt)?;
    let resid = t.sub(v_pred, vt_v)?;
    let diff = t.row_weighted_sq(resid, w_diff)?;

    let smooth = if k >= 3 {
        let a_v = t.input_f64(&a_xt)?;
        let s_v = t.input_f64(&s_coef)?;
        let sv = t.mul(v_pred, s_v)?;
        let x0_hat = t.sub(a_v, sv)?;
        let u = t.gather(x0_hat, Arc::new(up))?;
        let m = t.gather(x0_hat, Arc::new(mid))?;
        let d = t.gather(x0_hat, Arc::new(down))?;
        let m2 = t.scale(m, 2.0)?;
        let ud = t.add(u, d)?;
        let d2 = t.sub(ud, m2)?;
        t.charbonnier(d2, w_smooth, lw.charbonnier_eps)?
    } else {
        t.input(Array2::zeros((1, 1)))?
    };

    let h = Array2::from_shape_fn((b, cfg.d_teacher), |(i, j)| batch[i].teacher[j]);
    let h_v = t.input_f64(&h)?;
    let wp = t.p("align.proj.w")?;
    let bp = t.p("align.proj.b")?;
    let proj = t.linear(enc.t3d, wp, Some(bp))?;
    let ar = t.sub(proj, h_v)?;
    let align = t.row_weighted_sq(ar, vec![inv_b; b])?;

    let sa = t.scale(align, lw.lambda_align)?;
    let ss = t.scale(smooth, lw.lambda_smooth)?;
    let total = t.add(diff, sa)?;
    let total = t.add(total, ss)?;
    Ok(LossVars {
        total,
        diff,
        align,
        smooth,
    })
}

/// Loss value, its parts and the gradient of every trainable parameter.
pub fn total_loss<T: Real, R: Rng>(
    store: &ParamStore,
    cfg: &NetConfig,
    batch: &Batch<'_>,
    lw: &LossWeights,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<(LossParts, Vec<(ParamId, Array2<f64>)>)> {
    let draws = Draws::sample(
        rng,
        batch.len(),
        cfg.k * cfg.n * 3,
        sched.steps(),
        lw.p_uncond,
    );
    loss_with_draws::<T>(store, cfg, batch, &draws, lw, sched)
}

pub fn loss_with_draws<T: Real>(
    store: &ParamStore,
    cfg: &NetConfig,
    batch: &Batch<'_>,
    draws: &Draws,
    lw: &LossWeights,
    sched: &DiffusionSchedule,
) -> Result<(LossParts, Vec<(ParamId, Array2<f64>)>)> {
    let mut t = Tape::<T>::new(store);
    let lv = loss_graph(&mut t, cfg, batch, draws, sched, lw)?;
    let scalar = |v: Var| t.value(v)[[0, 0]].f64();
    let parts = LossParts {
        total: scalar(lv.total),
        diff: scalar(lv.diff),
        align: scalar(lv.align),
        smooth: scalar(lv.smooth),
    };
    for (name, v) in [
        ("loss_diff", parts.diff),
        ("loss_align", parts.align),
        ("loss_smooth", parts.smooth),
        ("loss_total", parts.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let grads = t.backward(lv.total)?;
    let g = grads
        .params(&t)
        .into_iter()
        .filter(|(id, _)| !store.is_frozen(*id))
        .collect();
    Ok((parts, g))
}

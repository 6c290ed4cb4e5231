//! Condition encoder and denoiser of the flow planner.

use std::sync::Arc;

use ndarray::Array2;

use super::layers::{
    attention_pool, dit_block, linear, mha, mlp, perceiver_resample, reg_attention_pool,
    reg_dit_block, reg_linear, reg_linear_zero, reg_mha, reg_mlp, reg_perceiver, row_owner,
    sinusoid, DitShape, Grid, PerceiverShape,
};
use super::params::{Init, ParamStore};
use super::tape::{AttnLayout, Real, Tape, Var};
use super::NetConfig;
use crate::closedloop::world::OBS_DIM;
use crate::error::{Error, Result};

pub const TIME_PERIOD: f64 = 10_000.0;

/// Registers every planner parameter. Deterministic in `seed`.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let c = cfg.c;
    let mut s = ParamStore::new(seed);
    s.add_frozen(
        "feat.w",
        cfg.d_obs,
        cfg.feat_tokens * c,
        Init::Normal(1.0 / (cfg.d_obs as f64).sqrt()),
    )?;
    s.add_frozen("enc.text", cfg.vocab, c, Init::Normal(0.5))?;
    s.add_frozen(
        "teacher.w",
        cfg.d_obs,
        cfg.d_teacher,
        Init::Normal(1.0 / (cfg.d_obs as f64).sqrt()),
    )?;
    s.add("enc.q_local", cfg.n_local, c, Init::Zeros)?;
    reg_mha(&mut s, "enc.local", c)?;
    reg_perceiver(&mut s, "enc.p3d", perceiver_shape(cfg))?;
    reg_mlp(&mut s, "enc.point", 2, c, c)?;
    reg_attention_pool(&mut s, "enc.point_pool", c)?;
    s.add("null_cond", 1, cfg.cond_dim(), Init::Normal(0.02))?;
    reg_linear(&mut s, "den.in", 3, c)?;
    s.add("den.frame", cfg.k, c, Init::Normal(0.02))?;
    s.add("den.kp", cfg.n, c, Init::Normal(0.02))?;
    reg_mlp(&mut s, "den.time", c, c, c)?;
    for i in 0..cfg.dit_depth {
        reg_dit_block(&mut s, &format!("den.block{i}"), dit_shape(cfg, i))?;
    }
    reg_linear_zero(&mut s, "den.final_mod", cfg.cond_dim() + c, 2 * c)?;
    reg_linear_zero(&mut s, "den.out", c, 3)?;
    reg_linear_zero(&mut s, "align.proj", c, cfg.d_teacher)?;
    Ok(s)
}

pub(crate) fn perceiver_shape(cfg: &NetConfig) -> PerceiverShape {
    PerceiverShape {
        c: cfg.c,
        queries: cfg.n_3d,
        blocks: cfg.resampler_blocks,
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
    }
}

pub(crate) fn dit_shape(cfg: &NetConfig, block: usize) -> DitShape {
    DitShape {
        c: cfg.c,
        cond_dim: cfg.cond_dim(),
        heads: cfg.heads,
        mlp_ratio: cfg.mlp_ratio,
        cross: block < cfg.cross_blocks,
        frame_first: cfg.frame_first,
    }
}

/// Encoder outputs for a batch of `b` conditions, one row per sample
/// (`context` has `n_local` rows per sample).
#[derive(Debug, Clone, Copy)]
pub struct EncodedCond {
    pub g: Var,
    pub t3d: Var,
    pub q: Var,
    pub t_text: Var,
    pub context: Var,
    pub fused: Var,
}

/// One encoded condition, extracted from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub g: Vec<f64>,
    pub t3d: Vec<f64>,
    pub q: Vec<f64>,
    pub t_text: Vec<f64>,
    /// `n_local × C`.
    pub context: Array2<f64>,
    /// `[g ; t3d ; q ; t_text]`.
    pub fused: Vec<f64>,
}

/// Frozen teacher embedding of an observation.
pub fn teacher_embedding(store: &ParamStore, obs: &[f64; OBS_DIM]) -> Result<Vec<f64>> {
    let w = store.get("teacher.w")?;
    Ok((0..w.ncols())
        .map(|j| (0..OBS_DIM).map(|i| obs[i] * w[[i, j]]).sum())
        .collect())
}

/// Records the condition encoder for a batch of conditions.
pub fn encode_condition_vars<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &NetConfig,
    obs: &[[f64; OBS_DIM]],
    task_ids: &[usize],
    query: &[Option<&[[f64; 2]]>],
) -> Result<EncodedCond> {
    let b = obs.len();
    if b == 0 || task_ids.len() != b || query.len() != b {
        return Err(Error::Shape {
            op: "encode_condition",
            detail: format!("{b} obs, {} tasks, {} queries", task_ids.len(), query.len()),
        });
    }
    if let Some(&bad) = task_ids.iter().find(|&&id| id >= cfg.vocab) {
        return Err(Error::UnknownTask(bad));
    }
    if obs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation".into()));
    }
    let c = cfg.c;
    let obs_m = Array2::from_shape_fn((b, OBS_DIM), |(i, j)| obs[i][j]);
    let obs_v = t.input_f64(&obs_m)?;
    let feat_w = t.p("feat.w")?;
    let flat = t.linear(obs_v, feat_w, None)?;
    let tokens = t.reshape(flat, b * cfg.feat_tokens, c)?;

    let g = t.segment_mean(tokens, cfg.feat_tokens)?;

    let q_local = t.p("enc.q_local")?;
    let tile: Vec<usize> = (0..b).flat_map(|_| 0..cfg.n_local).collect();
    let ql = t.gather(q_local, Arc::new(tile))?;
    let layout = Arc::new(AttnLayout::blocks(b, cfg.n_local, cfg.feat_tokens));
    let context = mha(t, "enc.local", ql, tokens, cfg.heads, layout)?;

    let t3d = perceiver_resample(t, "enc.p3d", context, b, cfg.n_local, perceiver_shape(cfg))?;

    let q = if query.iter().all(|q| q.is_none()) {
        t.input(Array2::zeros((b, c)))?
    } else {
        let mut pts = Array2::zeros((b * cfg.n, 2));
        let mut mask = Array2::zeros((b, c));
        for (i, qp) in query.iter().enumerate() {
            if let Some(qp) = qp {
                if qp.len() != cfg.n {
                    return Err(Error::Shape {
                        op: "encode_condition",
                        detail: format!("{} query points, expected {}", qp.len(), cfg.n),
                    });
                }
                for (j, p) in qp.iter().enumerate() {
                    pts[[i * cfg.n + j, 0]] = p[0];
                    pts[[i * cfg.n + j, 1]] = p[1];
                }
                mask.row_mut(i).fill(1.0);
            }
        }
        let pv = t.input_f64(&pts)?;
        let pt = mlp(t, "enc.point", pv)?;
        let pooled = attention_pool(t, "enc.point_pool", pt, b, cfg.n, cfg.heads)?;
        let mv = t.input_f64(&mask)?;
        t.mul(pooled, mv)?
    };

    let table = t.p("enc.text")?;
    let t_text = t.gather(table, Arc::new(task_ids.to_vec()))?;
    let fused = t.concat_cols(&[g, t3d, q, t_text])?;
    Ok(EncodedCond {
        g,
        t3d,
        q,
        t_text,
        context,
        fused,
    })
}

/// Encodes a single condition in 64-bit.
pub fn encode_condition(
    store: &ParamStore,
    cfg: &NetConfig,
    obs: &[f64; OBS_DIM],
    task_id: usize,
    query: Option<&[[f64; 2]]>,
) -> Result<ConditionBundle> {
    let mut t = Tape::<f64>::new(store);
    let e = encode_condition_vars(&mut t, cfg, &[*obs], &[task_id], &[query])?;
    let row = |v: Var| t.value(v).iter().copied().collect::<Vec<f64>>();
    Ok(ConditionBundle {
        g: row(e.g),
        t3d: row(e.t3d),
        q: row(e.q),
        t_text: row(e.t_text),
        context: t.value(e.context).clone(),
        fused: row(e.fused),
    })
}

/// Sinusoidal timestep features, one row per sample.
pub fn time_features(timesteps: &[usize], c: usize) -> Array2<f64> {
    let mut m = Array2::zeros((timesteps.len(), c));
    for (i, &ts) in timesteps.iter().enumerate() {
        for (j, v) in sinusoid(ts as f64, c, TIME_PERIOD).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Predicts `v` for a batch of noisy flows.
///
/// `x_t` holds `b` flows of `K·N` rows each (row `k·N + n` of a sample is
/// keypoint `n` at keyframe `k`), `cond` one fused condition per sample and
/// `context` `n_local` rows per sample.
pub fn denoise<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &NetConfig,
    x_t: Var,
    timesteps: &[usize],
    cond: Var,
    context: Var,
) -> Result<Var> {
    let b = timesteps.len();
    let (kn, c) = (cfg.k * cfg.n, cfg.c);
    if t.shape(x_t) != (b * kn, 3)
        || t.shape(cond) != (b, cfg.cond_dim())
        || t.shape(context) != (b * cfg.n_local, c)
    {
        return Err(Error::Shape {
            op: "denoise",
            detail: format!(
                "x_t {:?}, cond {:?}, context {:?} for batch {b}",
                t.shape(x_t),
                t.shape(cond),
                t.shape(context)
            ),
        });
    }
    let grid = Grid::new(b, cfg.k, cfg.n);
    let h = linear(t, "den.in", x_t)?;
    let frame = t.p("den.frame")?;
    let frame = t.gather(
        frame,
        Arc::new((0..b * kn).map(|r| (r % kn) / cfg.n).collect()),
    )?;
    let kp = t.p("den.kp")?;
    let kp = t.gather(kp, Arc::new((0..b * kn).map(|r| r % cfg.n).collect()))?;
    let h = t.add(h, frame)?;
    let mut h = t.add(h, kp)?;

    let tf = t.input_f64(&time_features(timesteps, c))?;
    let temb = mlp(t, "den.time", tf)?;

    let ctx_layout = Arc::new(AttnLayout::blocks(b, kn, cfg.n_local));
    for i in 0..cfg.dit_depth {
        let shape = dit_shape(cfg, i);
        let ctx = shape.cross.then(|| (context, ctx_layout.clone()));
        h = dit_block(
            t,
            &format!("den.block{i}"),
            h,
            cond,
            temb,
            ctx,
            &grid,
            shape,
        )?;
    }

    let ct = t.concat_cols(&[cond, temb])?;
    let ct = t.silu(ct)?;
    let m = linear(t, "den.final_mod", ct)?;
    let shift = t.slice_cols(m, 0, c)?;
    let scale = t.slice_cols(m, c, c)?;
    let owner = row_owner(b, kn);
    let hn = t.layer_norm(h)?;
    let hn = t.scale_shift(hn, scale, shift, owner, 1.0)?;
    linear(t, "den.out", hn)
}

/// Per-sample rows of the condition, with rows flagged in `drop` replaced
/// by the learned null token.
pub fn apply_null_cond<T: Real>(t: &mut Tape<'_, T>, fused: Var, drop: &[bool]) -> Result<Var> {
    if !drop.iter().any(|&d| d) {
        return Ok(fused);
    }
    let b = drop.len();
    let null = t.p("null_cond")?;
    let both = t.concat_rows(&[fused, null])?;
    let idx: Vec<usize> = drop
        .iter()
        .enumerate()
        .map(|(i, &d)| if d { b } else { i })
        .collect();
    t.gather(both, Arc::new(idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedloop::world::TaskSpec;

    fn obs() -> [f64; OBS_DIM] {
        let cfg = crate::closedloop::world::WorldConfig::default();
        TaskSpec::pick_place().reset(3, &cfg).observation()
    }

    #[test]
    fn init_is_deterministic_with_zero_queries() {
        let cfg = NetConfig::tiny();
        let a = init_params(&cfg, 4).unwrap();
        assert_eq!(a, init_params(&cfg, 4).unwrap());
        assert!(a.get("enc.q_local").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.get("enc.p3d.queries").unwrap().iter().all(|&v| v == 0.0));
        assert!(a
            .get("enc.point_pool.anchor")
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn absent_query_gives_zero_point_anchor() {
        let cfg = NetConfig::tiny();
        let s = init_params(&cfg, 1).unwrap();
        let b = encode_condition(&s, &cfg, &obs(), 0, None).unwrap();
        assert!(b.q.iter().all(|&v| v == 0.0));
        let fused: Vec<f64> = [&b.g, &b.t3d, &b.q, &b.t_text]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        assert_eq!(fused, b.fused);
        assert_eq!(b.context.dim(), (cfg.n_local, cfg.c));
    }

    #[test]
    fn query_order_does_not_matter() {
        let cfg = NetConfig {
            n: 4,
            ..NetConfig::tiny()
        };
        let mut s = init_params(&cfg, 1).unwrap();
        let ids: Vec<_> = s.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let v = s.value(id).mapv(|x| x + 0.01 * ((i % 7) as f64 - 3.0));
            *s.value_mut(id) = v;
        }
        let q = [[0.1, 0.2], [0.4, 0.3], [0.9, 0.5], [0.2, 0.8]];
        let r = [q[2], q[0], q[3], q[1]];
        let a = encode_condition(&s, &cfg, &obs(), 1, Some(&q)).unwrap();
        let b = encode_condition(&s, &cfg, &obs(), 1, Some(&r)).unwrap();
        assert!(a.q.iter().any(|&v| v != 0.0));
        for (x, y) in a.q.iter().zip(&b.q) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(a, encode_condition(&s, &cfg, &obs(), 1, Some(&q)).unwrap());
    }

    #[test]
    fn unknown_task_is_rejected() {
        let cfg = NetConfig::tiny();
        let s = init_params(&cfg, 1).unwrap();
        assert!(matches!(
            encode_condition(&s, &cfg, &obs(), 99, None),
            Err(Error::UnknownTask(99))
        ));
    }

    #[test]
    fn fresh_denoiser_outputs_zero() {
        let cfg = NetConfig::tiny();
        let s = init_params(&cfg, 2).unwrap();
        let mut t = Tape::<f64>::new(&s);
        let e =
            encode_condition_vars(&mut t, &cfg, &[obs(), obs()], &[0, 1], &[None, None]).unwrap();
        let x = t
            .input(Array2::from_elem((2 * cfg.k * cfg.n, 3), 0.3))
            .unwrap();
        let v = denoise(&mut t, &cfg, x, &[3, 50], e.fused, e.context).unwrap();
        assert_eq!(t.shape(v), (2 * cfg.k * cfg.n, 3));
        assert!(t.value(v).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn null_cond_replaces_flagged_rows() {
        let cfg = NetConfig::tiny();
        let s = init_params(&cfg, 2).unwrap();
        let mut t = Tape::<f64>::new(&s);
        let e =
            encode_condition_vars(&mut t, &cfg, &[obs(), obs()], &[0, 1], &[None, None]).unwrap();
        let c = apply_null_cond(&mut t, e.fused, &[false, true]).unwrap();
        let null = s.get("null_cond").unwrap();
        assert_eq!(t.value(c).row(1), null.row(0));
        assert_eq!(t.value(c).row(0), t.value(e.fused).row(0));
    }
}

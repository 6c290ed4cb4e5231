//! Central finite-difference checks of every differentiable block.
//!
//! Each block builds a scalar from randomized parameters in 64-bit. Block
//! inputs are registered as parameters too, so one loop covers both.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::closedloop::world::{OBS_DIM, PROPRIO_DIM};
use crate::diffusion::losses::{loss_graph, Draws, Example};
use crate::diffusion::{build_schedule, LossWeights, ScheduleKind};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, FlowTensor};
use crate::net::layers::{
    attention_pool, dit_block, layer_norm, linear, mha, perceiver_resample, reg_attention_pool,
    reg_dit_block, reg_layer_norm, reg_linear, reg_mha, reg_perceiver, DitShape, Grid,
    PerceiverShape,
};
use crate::net::model::teacher_embedding;
use crate::net::{
    denoise, encode_condition_vars, init_params, AttnLayout, Init, NetConfig, ParamId, ParamStore,
    Tape, Var,
};
use crate::policy::train::bc_loss_graph;
use crate::policy::{encode_flow_vars, init_policy, BaseState, PolicyConfig};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Entries probed per parameter tensor; smaller tensors are probed fully.
pub const MAX_PROBES: usize = 24;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub const BLOCKS: [&str; 11] = [
    "linear",
    "layer_norm",
    "mha",
    "attention_pool",
    "perceiver",
    "dit_block",
    "encoder",
    "denoiser",
    "total_loss",
    "flow_encoder",
    "policy",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub block: &'static str,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOL
    }
}

type Graph = Box<dyn Fn(&mut Tape<'_, f64>) -> Result<Var>>;

/// `|a - f| / max(REL_FLOOR, |a| + |f|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_FLOOR)
}

fn eval(store: &ParamStore, g: &Graph) -> Result<f64> {
    let mut t = Tape::new(store);
    let v = g(&mut t)?;
    t.check_finite(v)?;
    Ok(t.value(v)[[0, 0]])
}

/// Compares analytic and central-difference gradients of `g` for a sample
/// of entries of every parameter.
pub fn check_graph(
    block: &'static str,
    store: &ParamStore,
    g: &Graph,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut t = Tape::new(store);
    let loss = g(&mut t)?;
    let analytic = t.backward(loss)?.params(&t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let (mut worst, mut probes) = (0.0f64, 0);
    for (id, grad) in &analytic {
        let len = grad.len();
        let picks: Vec<usize> = if len <= MAX_PROBES {
            (0..len).collect()
        } else {
            (0..MAX_PROBES).map(|_| rng.random_range(0..len)).collect()
        };
        let cols = grad.ncols();
        for flat in picks {
            let (r, c) = (flat / cols, flat % cols);
            let orig = work.value(*id)[[r, c]];
            work.value_mut(*id)[[r, c]] = orig + GRADCHECK_STEP;
            let up = eval(&work, g)?;
            work.value_mut(*id)[[r, c]] = orig - GRADCHECK_STEP;
            let down = eval(&work, g)?;
            work.value_mut(*id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
            worst = worst.max(rel_error(grad[[r, c]], numeric));
            probes += 1;
        }
    }
    Ok(GradcheckReport {
        block,
        max_rel_error: worst,
        probes,
    })
}

fn randomize(s: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<ParamId> = s.ids().collect();
    for id in ids {
        let v = s.value(id).mapv(|x| x + rng.random_range(-0.5..0.5));
        *s.value_mut(id) = v;
    }
}

/// Registers a random block input as a parameter named `in.{name}`.
fn input(s: &mut ParamStore, name: &str, rows: usize, cols: usize) -> Result<()> {
    s.add(&format!("in.{name}"), rows, cols, Init::Zeros)
        .map(|_| ())
}

/// A fixed random projection `Σ y ⊙ proj` turns any output into a scalar.
fn project(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e0);
    let proj = t.input(Array2::from_shape_fn((r, c), |_| {
        rng.random_range(-1.0..1.0)
    }))?;
    let m = t.mul(y, proj)?;
    t.sum(m)
}

fn tiny_net() -> NetConfig {
    NetConfig::tiny()
}

fn tiny_obs(rng: &mut ChaCha8Rng) -> [f64; OBS_DIM] {
    std::array::from_fn(|_| rng.random_range(0.0..1.0))
}

fn build(block: &str, seed: u64) -> Result<(ParamStore, Graph)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new(seed);
    let graph: Graph = match block {
        "linear" => {
            input(&mut s, "x", 3, 4)?;
            reg_linear(&mut s, "lin", 4, 5)?;
            Box::new(move |t| {
                let x = t.p("in.x")?;
                let y = linear(t, "lin", x)?;
                project(t, y, seed)
            })
        }
        "layer_norm" => {
            input(&mut s, "x", 4, 6)?;
            reg_layer_norm(&mut s, "ln", 6)?;
            Box::new(move |t| {
                let x = t.p("in.x")?;
                let y = layer_norm(t, "ln", x)?;
                project(t, y, seed)
            })
        }
        "mha" => {
            input(&mut s, "q", 6, 4)?;
            input(&mut s, "kv", 8, 4)?;
            reg_mha(&mut s, "att", 4)?;
            Box::new(move |t| {
                let (q, kv) = (t.p("in.q")?, t.p("in.kv")?);
                let y = mha(t, "att", q, kv, 2, Arc::new(AttnLayout::blocks(2, 3, 4)))?;
                project(t, y, seed)
            })
        }
        "attention_pool" => {
            input(&mut s, "x", 10, 4)?;
            reg_attention_pool(&mut s, "pool", 4)?;
            Box::new(move |t| {
                let x = t.p("in.x")?;
                let y = attention_pool(t, "pool", x, 2, 5, 2)?;
                project(t, y, seed)
            })
        }
        "perceiver" => {
            let shape = PerceiverShape {
                c: 4,
                queries: 2,
                blocks: 2,
                heads: 2,
                mlp_ratio: 2,
            };
            input(&mut s, "ctx", 6, 4)?;
            reg_perceiver(&mut s, "pr", shape)?;
            Box::new(move |t| {
                let x = t.p("in.ctx")?;
                let y = perceiver_resample(t, "pr", x, 2, 3, shape)?;
                project(t, y, seed)
            })
        }
        "dit_block" => {
            let shape = DitShape {
                c: 4,
                cond_dim: 6,
                heads: 2,
                mlp_ratio: 2,
                cross: true,
                frame_first: true,
            };
            let grid = Grid::new(2, 3, 2);
            input(&mut s, "x", grid.rows(), 4)?;
            input(&mut s, "cond", 2, 6)?;
            input(&mut s, "temb", 2, 4)?;
            input(&mut s, "ctx", 2 * 3, 4)?;
            reg_dit_block(&mut s, "blk", shape)?;
            Box::new(move |t| {
                let (x, c, e, ctx) = (
                    t.p("in.x")?,
                    t.p("in.cond")?,
                    t.p("in.temb")?,
                    t.p("in.ctx")?,
                );
                let layout = Arc::new(AttnLayout::blocks(2, 6, 3));
                let y = dit_block(t, "blk", x, c, e, Some((ctx, layout)), &grid, shape)?;
                project(t, y, seed)
            })
        }
        "encoder" => {
            let cfg = tiny_net();
            s = init_params(&cfg, seed)?;
            let obs = [tiny_obs(&mut rng), tiny_obs(&mut rng)];
            let query: Vec<[f64; 2]> = (0..cfg.n)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            Box::new(move |t| {
                let e = encode_condition_vars(t, &cfg, &obs, &[0, 2], &[Some(&query), None])?;
                let f = project(t, e.fused, seed)?;
                let ctx = project(t, e.context, seed ^ 1)?;
                t.add(f, ctx)
            })
        }
        "denoiser" => {
            let cfg = tiny_net();
            s = init_params(&cfg, seed)?;
            let b = 2;
            input(&mut s, "x", b * cfg.k * cfg.n, 3)?;
            input(&mut s, "cond", b, cfg.cond_dim())?;
            input(&mut s, "ctx", b * cfg.n_local, cfg.c)?;
            Box::new(move |t| {
                let (x, c, ctx) = (t.p("in.x")?, t.p("in.cond")?, t.p("in.ctx")?);
                let y = denoise(t, &cfg, x, &[3, 40], c, ctx)?;
                project(t, y, seed)
            })
        }
        "total_loss" => {
            let cfg = tiny_net();
            s = init_params(&cfg, seed)?;
            let kn = cfg.k * cfg.n;
            let sched = build_schedule(50, ScheduleKind::Cosine)?;
            let query: Vec<[f64; 2]> = (0..cfg.n)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let mut owned = Vec::new();
            for i in 0..3 {
                let obs = tiny_obs(&mut rng);
                let mut weights = vec![1.0; kn];
                weights[i] = 0.0;
                let x0: Vec<f64> = (0..kn * 3).map(|_| rng.random_range(-1.5..1.5)).collect();
                owned.push((x0, weights, obs, teacher_embedding(&s, &obs)?));
            }
            let draws = Draws {
                t: vec![5, 25, 50],
                eps: (0..3)
                    .map(|_| (0..kn * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect(),
                drop: vec![false, true, false],
            };
            let lw = LossWeights {
                lambda_align: 0.3,
                lambda_smooth: 0.2,
                charbonnier_eps: 0.05,
                ..LossWeights::default()
            };
            Box::new(move |t| {
                let batch: Vec<Example<'_>> = owned
                    .iter()
                    .enumerate()
                    .map(|(i, (x0, weights, obs, teacher))| Example {
                        x0: x0.clone(),
                        weights: weights.clone(),
                        obs: *obs,
                        task_id: i % 3,
                        query: (i == 0).then_some(query.as_slice()),
                        teacher: teacher.clone(),
                    })
                    .collect();
                Ok(loss_graph(t, &cfg, &batch, &draws, &sched, &lw)?.total)
            })
        }
        "flow_encoder" => {
            let cfg = PolicyConfig::tiny();
            s = init_policy(&cfg, seed)?;
            input(&mut s, "tokens", 2 * cfg.k * cfg.n, 3 + cfg.frame_dim)?;
            Box::new(move |t| {
                let x = t.p("in.tokens")?;
                let y = encode_flow_vars(t, &cfg, x, 2)?;
                project(t, y, seed)
            })
        }
        "policy" => {
            let cfg = PolicyConfig::tiny();
            s = init_policy(&cfg, seed)?;
            let base: Vec<BaseState> = (0..2)
                .map(|i| BaseState {
                    observation: tiny_obs(&mut rng),
                    task_id: i,
                    proprio: std::array::from_fn(|j| {
                        if j + 1 == PROPRIO_DIM {
                            i as f64
                        } else {
                            rng.random_range(0.0..1.0)
                        }
                    }),
                })
                .collect();
            let flows: Vec<FlowTensor> = (0..2)
                .map(|_| {
                    FlowTensor::with_unit_weights(
                        cfg.k,
                        cfg.n,
                        (0..cfg.k * cfg.n * 3)
                            .map(|_| rng.random_range(0.0..1.0))
                            .collect(),
                    )
                })
                .collect::<Result<_>>()?;
            let targets: Vec<ActionChunk> = (0..2)
                .map(|i| {
                    let d = (0..cfg.horizon)
                        .map(|_| [0, 1, 2].map(|_| rng.random_range(-0.02..0.02)))
                        .collect();
                    ActionChunk::new(d, (0..cfg.horizon).map(|h| ((h + i) % 2) as f64).collect())
                })
                .collect::<Result<_>>()?;
            Box::new(move |t| {
                let fl: Vec<&FlowTensor> = flows.iter().collect();
                let tg: Vec<&ActionChunk> = targets.iter().collect();
                Ok(bc_loss_graph(t, &cfg, &base, &fl, &tg)?.total)
            })
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown gradcheck block {other}"
            )))
        }
    };
    randomize(&mut s, &mut rng);
    Ok((s, graph))
}

pub fn gradcheck_block(block: &str, seed: u64) -> Result<GradcheckReport> {
    let name = BLOCKS
        .iter()
        .copied()
        .find(|b| *b == block)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown gradcheck block {block}")))?;
    let (store, g) = build(name, seed)?;
    check_graph(name, &store, &g, seed)
}

pub fn gradcheck_all(seed: u64) -> Result<Vec<GradcheckReport>> {
    BLOCKS.iter().map(|b| gradcheck_block(b, seed)).collect()
}

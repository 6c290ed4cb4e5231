//! Parameterized building blocks. Each block has a `reg_*` function that
//! registers its parameters under a name prefix and a forward function that
//! records it on a tape.

use std::sync::Arc;

use super::params::{Init, ParamStore};
use super::tape::{AttnLayout, Real, Tape, Var};
use crate::error::Result;

fn n(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Row index -> sample index for `b` samples of `per` consecutive rows.
pub fn row_owner(b: usize, per: usize) -> Arc<Vec<usize>> {
    Arc::new((0..b * per).map(|r| r / per).collect())
}

pub fn reg_linear(s: &mut ParamStore, p: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    s.add(&n(p, "w"), fan_in, fan_out, Init::Xavier)?;
    s.add(&n(p, "b"), 1, fan_out, Init::Zeros)?;
    Ok(())
}

/// Linear layer whose weights start at zero.
pub fn reg_linear_zero(s: &mut ParamStore, p: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    s.add(&n(p, "w"), fan_in, fan_out, Init::Zeros)?;
    s.add(&n(p, "b"), 1, fan_out, Init::Zeros)?;
    Ok(())
}

pub fn linear<T: Real>(t: &mut Tape<'_, T>, p: &str, x: Var) -> Result<Var> {
    let w = t.p(&n(p, "w"))?;
    let b = t.p(&n(p, "b"))?;
    t.linear(x, w, Some(b))
}

pub fn reg_layer_norm(s: &mut ParamStore, p: &str, c: usize) -> Result<()> {
    s.add(&n(p, "gain"), 1, c, Init::Ones)?;
    s.add(&n(p, "bias"), 1, c, Init::Zeros)?;
    Ok(())
}

/// Layer normalization with a learned per-channel gain and bias.
pub fn layer_norm<T: Real>(t: &mut Tape<'_, T>, p: &str, x: Var) -> Result<Var> {
    let rows = t.shape(x).0;
    let h = t.layer_norm(x)?;
    let gain = t.p(&n(p, "gain"))?;
    let bias = t.p(&n(p, "bias"))?;
    t.scale_shift(h, gain, bias, Arc::new(vec![0; rows]), 0.0)
}

pub fn reg_mlp(
    s: &mut ParamStore,
    p: &str,
    fan_in: usize,
    hidden: usize,
    fan_out: usize,
) -> Result<()> {
    reg_linear(s, &n(p, "l1"), fan_in, hidden)?;
    reg_linear(s, &n(p, "l2"), hidden, fan_out)
}

/// Two-layer perceptron with a GELU in between.
pub fn mlp<T: Real>(t: &mut Tape<'_, T>, p: &str, x: Var) -> Result<Var> {
    let h = linear(t, &n(p, "l1"), x)?;
    let h = t.gelu(h)?;
    linear(t, &n(p, "l2"), h)
}

/// The key projection has no bias: a shared offset on every key shifts all
/// logits of a query equally and cancels in the softmax.
pub fn reg_mha(s: &mut ParamStore, p: &str, c: usize) -> Result<()> {
    reg_linear(s, &n(p, "q"), c, c)?;
    s.add(&n(p, "k.w"), c, c, Init::Xavier)?;
    reg_linear(s, &n(p, "v"), c, c)?;
    reg_linear(s, &n(p, "o"), c, c)
}

/// Multi-head attention: project queries, keys and values, attend within
/// the layout's groups, project the result.
pub fn mha<T: Real>(
    t: &mut Tape<'_, T>,
    p: &str,
    query: Var,
    kv: Var,
    heads: usize,
    layout: Arc<AttnLayout>,
) -> Result<Var> {
    let q = linear(t, &n(p, "q"), query)?;
    let wk = t.p(&n(p, "k.w"))?;
    let k = t.linear(kv, wk, None)?;
    let v = linear(t, &n(p, "v"), kv)?;
    let a = t.attention(q, k, v, heads, layout)?;
    linear(t, &n(p, "o"), a)
}

pub fn reg_attention_pool(s: &mut ParamStore, p: &str, c: usize) -> Result<()> {
    s.add(&n(p, "anchor"), 1, c, Init::Zeros)?;
    reg_mha(s, &n(p, "attn"), c)
}

/// Pools each of `b` blocks of `per` token rows into one row, using a
/// learned anchor as the single query.
pub fn attention_pool<T: Real>(
    t: &mut Tape<'_, T>,
    p: &str,
    tokens: Var,
    b: usize,
    per: usize,
    heads: usize,
) -> Result<Var> {
    let anchor = t.p(&n(p, "anchor"))?;
    let queries = t.gather(anchor, Arc::new(vec![0; b]))?;
    mha(
        t,
        &n(p, "attn"),
        queries,
        tokens,
        heads,
        Arc::new(AttnLayout::blocks(b, 1, per)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PerceiverShape {
    pub c: usize,
    pub queries: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

pub fn reg_perceiver(s: &mut ParamStore, p: &str, shape: PerceiverShape) -> Result<()> {
    let c = shape.c;
    s.add(&n(p, "queries"), shape.queries, c, Init::Zeros)?;
    for i in 0..shape.blocks {
        let bp = format!("{p}.block{i}");
        reg_layer_norm(s, &n(&bp, "ln_q"), c)?;
        reg_layer_norm(s, &n(&bp, "ln_ctx"), c)?;
        reg_mha(s, &n(&bp, "xattn"), c)?;
        reg_layer_norm(s, &n(&bp, "ln_ff"), c)?;
        reg_mlp(s, &n(&bp, "ff"), c, c * shape.mlp_ratio, c)?;
    }
    reg_mlp(s, &n(p, "proj"), c, c, c)
}

/// Learned queries cross-attend to `per_sample` context rows per sample
/// through stacked (cross-attention, feed-forward) residual blocks; the
/// queries are then mean-pooled and projected. Returns `b × c`.
pub fn perceiver_resample<T: Real>(
    t: &mut Tape<'_, T>,
    p: &str,
    context: Var,
    b: usize,
    per_sample: usize,
    shape: PerceiverShape,
) -> Result<Var> {
    let queries = t.p(&n(p, "queries"))?;
    let tile: Vec<usize> = (0..b).flat_map(|_| 0..shape.queries).collect();
    let mut q = t.gather(queries, Arc::new(tile))?;
    let layout = Arc::new(AttnLayout::blocks(b, shape.queries, per_sample));
    for i in 0..shape.blocks {
        let bp = format!("{p}.block{i}");
        let hq = layer_norm(t, &n(&bp, "ln_q"), q)?;
        let hc = layer_norm(t, &n(&bp, "ln_ctx"), context)?;
        let a = mha(t, &n(&bp, "xattn"), hq, hc, shape.heads, layout.clone())?;
        q = t.add(q, a)?;
        let h = layer_norm(t, &n(&bp, "ln_ff"), q)?;
        let f = mlp(t, &n(&bp, "ff"), h)?;
        q = t.add(q, f)?;
    }
    let pooled = t.segment_mean(q, shape.queries)?;
    mlp(t, &n(p, "proj"), pooled)
}

/// Token grid geometry shared by the blocks of one batched denoiser pass.
#[derive(Debug, Clone)]
pub struct Grid {
    pub b: usize,
    pub k: usize,
    pub n: usize,
    pub frame: Arc<AttnLayout>,
    pub keypoint: Arc<AttnLayout>,
    pub owner: Arc<Vec<usize>>,
}

impl Grid {
    pub fn new(b: usize, k: usize, n: usize) -> Self {
        Self {
            b,
            k,
            n,
            frame: Arc::new(AttnLayout::frame_axis(b, k, n)),
            keypoint: Arc::new(AttnLayout::keypoint_axis(b, k, n)),
            owner: row_owner(b, k * n),
        }
    }

    pub fn rows(&self) -> usize {
        self.b * self.k * self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DitShape {
    pub c: usize,
    pub cond_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cross: bool,
    pub frame_first: bool,
}

impl DitShape {
    fn mod_width(&self) -> usize {
        if self.cross {
            9 * self.c
        } else {
            6 * self.c
        }
    }
}

pub fn reg_dit_block(s: &mut ParamStore, p: &str, shape: DitShape) -> Result<()> {
    let c = shape.c;
    reg_linear_zero(s, &n(p, "mod"), shape.cond_dim + c, shape.mod_width())?;
    reg_mha(s, &n(p, "attn_a"), c)?;
    reg_mha(s, &n(p, "attn_b"), c)?;
    if shape.cross {
        reg_mha(s, &n(p, "xattn"), c)?;
    }
    reg_mlp(s, &n(p, "ff"), c, c * shape.mlp_ratio, c)
}

/// `LN(x) * (1 + scale) + shift` with per-sample modulation rows.
fn modulate<T: Real>(
    t: &mut Tape<'_, T>,
    x: Var,
    shift: Var,
    scale: Var,
    owner: &Arc<Vec<usize>>,
) -> Result<Var> {
    let h = t.layer_norm(x)?;
    t.scale_shift(h, scale, shift, owner.clone(), 1.0)
}

fn gated_residual<T: Real>(
    t: &mut Tape<'_, T>,
    x: Var,
    gate: Var,
    update: Var,
    owner: &Arc<Vec<usize>>,
) -> Result<Var> {
    t.gated_add(x, gate, update, owner.clone())
}

/// One diffusion-transformer block over a batch of `k × n` token grids.
///
/// `[cond ; time_emb]` drives AdaLN shift/scale/gate triples for the
/// factorized spatiotemporal attention, the optional cross-attention to
/// `context` and the feed-forward sub-layer. All gates come from a
/// zero-initialized projection, so a fresh block is the identity.
#[allow(clippy::too_many_arguments)]
pub fn dit_block<T: Real>(
    t: &mut Tape<'_, T>,
    p: &str,
    x: Var,
    cond: Var,
    time_emb: Var,
    context: Option<(Var, Arc<AttnLayout>)>,
    grid: &Grid,
    shape: DitShape,
) -> Result<Var> {
    let c = shape.c;
    let ct = t.concat_cols(&[cond, time_emb])?;
    let ct = t.silu(ct)?;
    let m = linear(t, &n(p, "mod"), ct)?;
    let mut chunk = |i: usize| t.slice_cols(m, i * c, c);
    let (sh1, sc1, g1) = (chunk(0)?, chunk(1)?, chunk(2)?);
    let (sh2, sc2, g2) = (chunk(3)?, chunk(4)?, chunk(5)?);
    let cross = if shape.cross {
        Some((chunk(6)?, chunk(7)?, chunk(8)?))
    } else {
        None
    };

    let (first, second) = if shape.frame_first {
        (grid.frame.clone(), grid.keypoint.clone())
    } else {
        (grid.keypoint.clone(), grid.frame.clone())
    };
    let h = modulate(t, x, sh1, sc1, &grid.owner)?;
    let a = mha(t, &n(p, "attn_a"), h, h, shape.heads, first)?;
    let ha = t.add(h, a)?;
    let b = mha(t, &n(p, "attn_b"), ha, ha, shape.heads, second)?;
    let st = t.add(a, b)?;
    let mut x = gated_residual(t, x, g1, st, &grid.owner)?;

    if let (Some((sh3, sc3, g3)), Some((ctx, layout))) = (cross, context) {
        let h = modulate(t, x, sh3, sc3, &grid.owner)?;
        let a = mha(t, &n(p, "xattn"), h, ctx, shape.heads, layout)?;
        x = gated_residual(t, x, g3, a, &grid.owner)?;
    }

    let h = modulate(t, x, sh2, sc2, &grid.owner)?;
    let f = mlp(t, &n(p, "ff"), h)?;
    gated_residual(t, x, g2, f, &grid.owner)
}

/// Sinusoidal features of a scalar position, width `dim` (even).
pub fn sinusoid(pos: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

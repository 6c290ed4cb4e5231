//! Flow-conditioned action policy: a pooled flow embedding fused with the
//! base state feeds a regression head that emits one action chunk.

pub mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

pub use train::{
    bc_train, build_bc_samples, BcSample, FlowSource, PolicyTrainConfig, PolicyTrainReport,
};

use crate::closedloop::world::{OBS_DIM, PROPRIO_DIM, TASK_VOCAB};
use crate::error::{Error, Result};
use crate::flow::{ActionChunk, FlowTensor, NormStats};
use crate::net::checkpoint::{read_body, read_header, write_store};
use crate::net::layers::{
    attention_pool, linear, mlp, reg_attention_pool, reg_linear, reg_linear_zero, reg_mlp, sinusoid,
};
use crate::net::{Init, ParamStore, Real, Tape, Var};

pub const POLICY_MAGIC: &[u8; 4] = b"F4DP";
/// Flow positions enter the encoder relative to the gripper, times this gain.
pub const FLOW_GAIN: f64 = 5.0;
const FRAME_PERIOD: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseState {
    pub observation: [f64; OBS_DIM],
    pub task_id: usize,
    /// Gripper position and closed flag.
    pub proprio: [f64; PROPRIO_DIM],
}

impl BaseState {
    pub fn validate(&self) -> Result<()> {
        if self
            .observation
            .iter()
            .chain(&self.proprio)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("base state".into()));
        }
        if self.task_id >= TASK_VOCAB {
            return Err(Error::UnknownTask(self.task_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    /// Flow-condition width.
    pub c_cond: usize,
    /// Base-condition width.
    pub c_base: usize,
    /// Hidden width of the action head.
    pub hidden: usize,
    /// Chunk horizon `H`.
    pub horizon: usize,
    pub heads: usize,
    /// Width of the frame-index encoding on flow tokens.
    pub frame_dim: usize,
    pub task_dim: usize,
    pub k: usize,
    pub n: usize,
    pub d_obs: usize,
    pub vocab: usize,
    /// Displacements are predicted in units of this length.
    pub action_scale: f64,
    /// When false the flow condition is a zero vector.
    pub use_flow: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            c_cond: 32,
            c_base: 64,
            hidden: 128,
            horizon: 20,
            heads: 2,
            frame_dim: 8,
            task_dim: 16,
            k: 8,
            n: 16,
            d_obs: OBS_DIM,
            vocab: TASK_VOCAB,
            action_scale: 0.02,
            use_flow: true,
        }
    }
}

impl PolicyConfig {
    pub fn tiny() -> Self {
        Self {
            c_cond: 4,
            c_base: 6,
            hidden: 8,
            horizon: 3,
            heads: 2,
            frame_dim: 4,
            task_dim: 3,
            k: 3,
            n: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon >= 1
            && self.c_cond > 0
            && self.c_base > 0
            && self.hidden > 0
            && self.heads > 0
            && self.c_cond % self.heads == 0
            && self.frame_dim % 2 == 0
            && self.k >= 1
            && self.n >= 1
            && self.d_obs == OBS_DIM
            && self.vocab >= 1
            && self.action_scale > 0.0
            && self.action_scale.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid policy config {self:?}"
            )));
        }
        Ok(())
    }

    fn base_in(&self) -> usize {
        self.d_obs + self.task_dim + PROPRIO_DIM
    }

    pub fn cond_dim(&self) -> usize {
        self.c_base + self.c_cond
    }
}

pub fn init_policy(cfg: &PolicyConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new(seed);
    reg_mlp(
        &mut s,
        "pol.flow",
        3 + cfg.frame_dim,
        cfg.c_cond,
        cfg.c_cond,
    )?;
    reg_attention_pool(&mut s, "pol.pool", cfg.c_cond)?;
    s.add("pol.task", cfg.vocab, cfg.task_dim, Init::Normal(0.5))?;
    reg_mlp(&mut s, "pol.base", cfg.base_in(), cfg.c_base, cfg.c_base)?;
    reg_linear(&mut s, "pol.head.l1", cfg.cond_dim(), cfg.hidden)?;
    reg_linear(&mut s, "pol.head.l2", cfg.hidden, cfg.hidden)?;
    reg_linear_zero(&mut s, "pol.head.out", cfg.hidden, cfg.horizon * 4)?;
    Ok(s)
}

/// Encoder input rows for one flow: `(p - origin) * FLOW_GAIN` followed by
/// the frame-index encoding.
pub fn flow_tokens(cfg: &PolicyConfig, flow: &FlowTensor, origin: [f64; 3]) -> Result<Array2<f64>> {
    if flow.keyframes() != cfg.k || flow.keypoints() != cfg.n {
        return Err(Error::ConfigMismatch(format!(
            "flow {}x{} vs policy {}x{}",
            flow.keyframes(),
            flow.keypoints(),
            cfg.k,
            cfg.n
        )));
    }
    point_tokens(cfg, flow.values(), origin)
}

/// Like [`flow_tokens`] over raw `k × n × 3` positions. A single keyframe
/// is allowed here and gets frame index 0.
pub fn point_tokens(cfg: &PolicyConfig, values: &[f64], origin: [f64; 3]) -> Result<Array2<f64>> {
    if values.len() != cfg.k * cfg.n * 3 {
        return Err(Error::Shape {
            op: "point_tokens",
            detail: format!("{} values for {}x{}", values.len(), cfg.k, cfg.n),
        });
    }
    let w = 3 + cfg.frame_dim;
    let mut m = Array2::zeros((cfg.k * cfg.n, w));
    for k in 0..cfg.k {
        let enc = sinusoid(k as f64, cfg.frame_dim, FRAME_PERIOD);
        for n in 0..cfg.n {
            let r = k * cfg.n + n;
            let mut row = m.row_mut(r);
            for a in 0..3 {
                row[a] = (values[3 * r + a] - origin[a]) * FLOW_GAIN;
            }
            for (j, &e) in enc.iter().enumerate() {
                row[3 + j] = e;
            }
        }
    }
    Ok(m)
}

/// `f_flow` for a batch: per-token perceptron, then attention pooling over
/// all `K·N` tokens of each sample.
pub fn encode_flow_vars<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &PolicyConfig,
    tokens: Var,
    b: usize,
) -> Result<Var> {
    let h = mlp(t, "pol.flow", tokens)?;
    attention_pool(t, "pol.pool", h, b, cfg.k * cfg.n, cfg.heads)
}

/// `f_cond = [f_base ; f_flow]`.
pub fn fuse_condition_vars<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &PolicyConfig,
    base: &[BaseState],
    f_flow: Var,
) -> Result<Var> {
    let b = base.len();
    let mut raw = Array2::zeros((b, cfg.d_obs + PROPRIO_DIM));
    for (i, s) in base.iter().enumerate() {
        s.validate()?;
        if s.task_id >= cfg.vocab {
            return Err(Error::UnknownTask(s.task_id));
        }
        for (j, &v) in s.observation.iter().chain(&s.proprio).enumerate() {
            raw[[i, j]] = v;
        }
    }
    let raw = t.input_f64(&raw)?;
    let obs = t.slice_cols(raw, 0, cfg.d_obs)?;
    let prop = t.slice_cols(raw, cfg.d_obs, PROPRIO_DIM)?;
    let table = t.p("pol.task")?;
    let emb = t.gather(table, Arc::new(base.iter().map(|s| s.task_id).collect()))?;
    let x = t.concat_cols(&[obs, emb, prop])?;
    let f_base = mlp(t, "pol.base", x)?;
    t.concat_cols(&[f_base, f_flow])
}

/// Head outputs: displacements in units of `action_scale` (`b × 3H`, step
/// major) and gripper logits (`b × H`).
pub fn head_vars<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &PolicyConfig,
    f_cond: Var,
) -> Result<(Var, Var)> {
    let h = linear(t, "pol.head.l1", f_cond)?;
    let h = t.gelu(h)?;
    let h = linear(t, "pol.head.l2", h)?;
    let h = t.gelu(h)?;
    let out = linear(t, "pol.head.out", h)?;
    let disp = t.slice_cols(out, 0, 3 * cfg.horizon)?;
    let grip = t.slice_cols(out, 3 * cfg.horizon, cfg.horizon)?;
    Ok((disp, grip))
}

/// Full batched graph from base states and flows to head outputs. With
/// `use_flow` off the flows are ignored.
pub fn policy_vars<T: Real>(
    t: &mut Tape<'_, T>,
    cfg: &PolicyConfig,
    base: &[BaseState],
    flows: &[&FlowTensor],
) -> Result<(Var, Var)> {
    let b = base.len();
    if b == 0 || flows.len() != b {
        return Err(Error::Shape {
            op: "policy",
            detail: format!("{b} states, {} flows", flows.len()),
        });
    }
    let f_flow = if cfg.use_flow {
        let mut tokens = Array2::zeros((b * cfg.k * cfg.n, 3 + cfg.frame_dim));
        for (i, (s, f)) in base.iter().zip(flows).enumerate() {
            let m = flow_tokens(cfg, f, [s.proprio[0], s.proprio[1], s.proprio[2]])?;
            tokens
                .slice_mut(ndarray::s![i * cfg.k * cfg.n..(i + 1) * cfg.k * cfg.n, ..])
                .assign(&m);
        }
        let tv = t.input_f64(&tokens)?;
        encode_flow_vars(t, cfg, tv, b)?
    } else {
        t.input(Array2::zeros((b, cfg.c_cond)))?
    };
    let f_cond = fuse_condition_vars(t, cfg, base, f_flow)?;
    head_vars(t, cfg, f_cond)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyCheckpoint {
    pub cfg: PolicyConfig,
    pub store: ParamStore,
}

impl PolicyCheckpoint {
    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        let store = init_policy(&cfg, seed)?;
        Ok(Self { cfg, store })
    }
}

/// `f_flow` of one flow seen from `origin`, in 64-bit.
pub fn encode_flow(ck: &PolicyCheckpoint, flow: &FlowTensor, origin: [f64; 3]) -> Result<Vec<f64>> {
    let mut t = Tape::<f64>::new(&ck.store);
    let tokens = t.input(flow_tokens(&ck.cfg, flow, origin)?)?;
    let f = encode_flow_vars(&mut t, &ck.cfg, tokens, 1)?;
    Ok(t.value(f).iter().copied().collect())
}

/// `f_cond` for one base state and a given `f_flow`, in 64-bit.
pub fn fuse_condition(ck: &PolicyCheckpoint, base: &BaseState, f_flow: &[f64]) -> Result<Vec<f64>> {
    if f_flow.len() != ck.cfg.c_cond {
        return Err(Error::Shape {
            op: "fuse_condition",
            detail: format!("f_flow width {}", f_flow.len()),
        });
    }
    let mut t = Tape::<f64>::new(&ck.store);
    let f =
        t.input(Array2::from_shape_vec((1, f_flow.len()), f_flow.to_vec()).expect("one row"))?;
    let c = fuse_condition_vars(&mut t, &ck.cfg, std::slice::from_ref(base), f)?;
    Ok(t.value(c).iter().copied().collect())
}

fn chunks_from<T: Real>(
    t: &Tape<'_, T>,
    cfg: &PolicyConfig,
    disp: Var,
    grip: Var,
) -> Result<Vec<ActionChunk>> {
    t.check_finite(disp)?;
    t.check_finite(grip)?;
    let (d, g) = (t.value(disp), t.value(grip));
    (0..d.nrows())
        .map(|i| {
            let deltas = (0..cfg.horizon)
                .map(|h| [0, 1, 2].map(|a| d[[i, 3 * h + a]].f64() * cfg.action_scale))
                .collect();
            let gripper = (0..cfg.horizon)
                .map(|h| 1.0 / (1.0 + (-g[[i, h]].f64()).exp()))
                .collect();
            ActionChunk::new(deltas, gripper)
        })
        .collect()
}

/// Head output for a given `f_cond`, in 64-bit.
pub fn policy_forward(ck: &PolicyCheckpoint, f_cond: &[f64]) -> Result<ActionChunk> {
    if f_cond.len() != ck.cfg.cond_dim() {
        return Err(Error::Shape {
            op: "policy_forward",
            detail: format!("f_cond width {}", f_cond.len()),
        });
    }
    let mut t = Tape::<f64>::new(&ck.store);
    let c =
        t.input(Array2::from_shape_vec((1, f_cond.len()), f_cond.to_vec()).expect("one row"))?;
    let (d, g) = head_vars(&mut t, &ck.cfg, c)?;
    Ok(chunks_from(&t, &ck.cfg, d, g)?.remove(0))
}

/// One chunk per `(state, flow)` in a single 64-bit batch.
pub fn act(
    ck: &PolicyCheckpoint,
    base: &[BaseState],
    flows: &[&FlowTensor],
) -> Result<Vec<ActionChunk>> {
    let mut t = Tape::<f64>::new(&ck.store);
    let (d, g) = policy_vars(&mut t, &ck.cfg, base, flows)?;
    chunks_from(&t, &ck.cfg, d, g)
}

fn config_fields(c: &PolicyConfig) -> Vec<u64> {
    let mut f: Vec<u64> = [
        c.c_cond,
        c.c_base,
        c.hidden,
        c.horizon,
        c.heads,
        c.frame_dim,
        c.task_dim,
        c.k,
        c.n,
        c.d_obs,
        c.vocab,
    ]
    .iter()
    .map(|&v| v as u64)
    .collect();
    f.push(c.action_scale.to_bits());
    f.push(c.use_flow as u64);
    f
}

fn config_from_fields(f: &[u64]) -> Result<PolicyConfig> {
    if f.len() != 13 {
        return Err(Error::Format(format!(
            "policy header has {} config fields, expected 13",
            f.len()
        )));
    }
    let u = |i: usize| f[i] as usize;
    let cfg = PolicyConfig {
        c_cond: u(0),
        c_base: u(1),
        hidden: u(2),
        horizon: u(3),
        heads: u(4),
        frame_dim: u(5),
        task_dim: u(6),
        k: u(7),
        n: u(8),
        d_obs: u(9),
        vocab: u(10),
        action_scale: f64::from_bits(f[11]),
        use_flow: f[12] != 0,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("policy config: {e}")))?;
    Ok(cfg)
}

pub fn write_policy<W: Write>(w: &mut W, ck: &PolicyCheckpoint) -> Result<()> {
    write_store(
        w,
        POLICY_MAGIC,
        &config_fields(&ck.cfg),
        &ck.store,
        &NormStats::identity(),
    )
}

pub fn read_policy<R: Read>(r: &mut R) -> Result<PolicyCheckpoint> {
    let (seed, fields) = read_header(r, POLICY_MAGIC)?;
    let cfg = config_from_fields(&fields)?;
    let mut store = init_policy(&cfg, seed)?;
    read_body(r, &mut store)?;
    Ok(PolicyCheckpoint { cfg, store })
}

pub fn save_policy(path: &Path, ck: &PolicyCheckpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_policy(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyCheckpoint> {
    read_policy(&mut BufReader::new(File::open(path)?))
}

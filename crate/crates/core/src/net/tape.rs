//! Reverse-mode differentiation over row-major 2D arrays.
//!
//! A [`Tape`] records every operation of one forward pass together with the
//! values needed by its backward rule. Parameters enter the tape from a
//! [`ParamStore`] (always held in 64-bit) and are converted to the tape's
//! scalar type, so the same graph code runs in `f32` for training and `f64`
//! for gradient checks.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    /// `exp`, possibly by a cheaper approximation accurate to the type's
    /// precision. Inputs are clamped to the representable range.
    fn fexp(self) -> Self;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn fexp(self) -> Self {
        exp_f32(self)
    }
}

/// Range reduction to `2^k e^r` with `|r| <= ln2/2` and a degree-6 Taylor
/// polynomial; relative error below 3e-7. NaN propagates.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let k = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let r = x - k * 0.693_145_75 - k * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    p * f32::from_bits(((k as i32 + 127) << 23) as u32)
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn fexp(self) -> Self {
        self.exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query/key row groups for [`Tape::attention`]: every query row in a group
/// attends to exactly the key rows of that group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub groups: Vec<(Vec<usize>, Vec<usize>)>,
    pub n_q: usize,
    pub n_k: usize,
}

impl AttnLayout {
    /// One group: all queries attend to all keys.
    pub fn full(n_q: usize, n_k: usize) -> Self {
        Self {
            groups: vec![((0..n_q).collect(), (0..n_k).collect())],
            n_q,
            n_k,
        }
    }

    /// `b` independent blocks of `q_per` queries and `k_per` keys.
    pub fn blocks(b: usize, q_per: usize, k_per: usize) -> Self {
        let groups = (0..b)
            .map(|i| {
                (
                    (i * q_per..(i + 1) * q_per).collect(),
                    (i * k_per..(i + 1) * k_per).collect(),
                )
            })
            .collect();
        Self {
            groups,
            n_q: b * q_per,
            n_k: b * k_per,
        }
    }

    /// Self-attention along the keyframe axis of `b` stacked `k × n` grids:
    /// one group per (sample, keypoint).
    pub fn frame_axis(b: usize, k: usize, n: usize) -> Self {
        let mut groups = Vec::with_capacity(b * n);
        for bi in 0..b {
            for ni in 0..n {
                let rows: Vec<usize> = (0..k).map(|ki| bi * k * n + ki * n + ni).collect();
                groups.push((rows.clone(), rows));
            }
        }
        Self {
            groups,
            n_q: b * k * n,
            n_k: b * k * n,
        }
    }

    /// Self-attention along the keypoint axis: one group per (sample, frame).
    pub fn keypoint_axis(b: usize, k: usize, n: usize) -> Self {
        let mut groups = Vec::with_capacity(b * k);
        for bi in 0..b {
            for ki in 0..k {
                let rows: Vec<usize> = (0..n).map(|ni| bi * k * n + ki * n + ni).collect();
                groups.push((rows.clone(), rows));
            }
        }
        Self {
            groups,
            n_q: b * k * n,
            n_k: b * k * n,
        }
    }

    fn prob_len(&self, heads: usize) -> usize {
        self.groups
            .iter()
            .map(|(q, k)| q.len() * k.len())
            .sum::<usize>()
            * heads
    }
}

enum Op<T> {
    Leaf,
    Param,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    ScaleShift {
        x: Var,
        scale: Var,
        shift: Var,
        owner: Arc<Vec<usize>>,
        offset: T,
    },
    GatedAdd {
        x: Var,
        gate: Var,
        u: Var,
        owner: Arc<Vec<usize>>,
    },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
        probs: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    SegmentMean(Var, usize),
    Sum(Var),
    RowWeightedSq(Var, Vec<T>),
    Charbonnier {
        x: Var,
        weights: Vec<T>,
        eps: T,
    },
    BceLogits {
        z: Var,
        y: Array2<T>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    name: &'static str,
}

pub const LN_EPS: f64 = 1e-6;

pub struct Tape<'p, T: Real> {
    store: &'p ParamStore,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Sigmoid form of GELU, `x σ(1.702 x)`.
pub const GELU_K: f64 = 1.702;

#[inline(always)]
fn gelu<T: Real>(x: T) -> T {
    x * sigmoid(T::of(GELU_K) * x)
}

#[inline(always)]
fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let s = sigmoid(k * x);
    s + k * x * s * (T::one() - s)
}

#[inline(always)]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).fexp())
}

/// Dot product with independent partial sums so it vectorizes.
#[inline(always)]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().fold(tail, |s, &v| s + v)
}

#[inline(always)]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(512),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        self.nodes.push(Node { value, op, name });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Fails with the name of the earliest non-finite node when `v` holds a
    /// non-finite value.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            return Ok(());
        }
        let first = self.nodes[..=v.0]
            .iter()
            .find(|n| n.value.iter().any(|x| !x.is_finite()));
        Err(Error::NonFinite(
            first.map_or("value", |n| n.name).to_string(),
        ))
    }

    fn check_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// A constant input (gradients are still reported for it).
    pub fn input(&mut self, value: Array2<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    pub fn input_f64(&mut self, value: &Array2<f64>) -> Result<Var> {
        self.input(value.mapv(T::of))
    }

    pub fn param_id(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let value = self.store.value(id).mapv(T::of);
        let v = self.push(value, Op::Param, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Parameter by name.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        self.param_id(id)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        if i != wi || b.is_some_and(|b| self.shape(b) != (1, o)) {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("x {n}x{i}, w {wi}x{o}"),
            });
        }
        let mut y = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            y += self.value(b);
        }
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let y = self.value(a) - self.value(b);
        self.push(y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul(a, b), "mul")
    }

    /// `a (n×c) + row (1×c)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if self.shape(row) != (1, self.shape(a).1) {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("{:?} + {:?}", self.shape(a), self.shape(row)),
            });
        }
        let y = self.value(a) + self.value(row);
        self.push(y, Op::AddRow(a, row), "add_row")
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if idx.iter().any(|&i| i >= rows) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("index out of {rows} rows"),
            });
        }
        let src = self.value(a);
        let mut y = Array2::zeros((idx.len(), cols));
        for (o, &i) in idx.iter().enumerate() {
            y.row_mut(o).assign(&src.row(i));
        }
        self.push(y, Op::Gather(a, idx), "gather")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let y = self.value(a) * s;
        self.push(y, Op::Scale(a, s), "scale")
    }

    /// `a + c` elementwise.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let y = self.value(a).mapv(|v| v + c);
        self.push(y, Op::AddScalar(a), "add_scalar")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).mapv(gelu);
        self.push(y, Op::Gelu(a), "gelu")
    }

    fn check_rows(
        &self,
        a: Var,
        rows: usize,
        cols: usize,
        owner: &[usize],
        op: &'static str,
    ) -> Result<()> {
        let (r, c) = self.shape(a);
        if c != cols || owner.len() != rows || owner.iter().any(|&o| o >= r) {
            return Err(Error::Shape {
                op,
                detail: format!("{r}x{c} rows for {rows}x{cols}"),
            });
        }
        Ok(())
    }

    /// `x * (offset + scale[owner[r]]) + shift[owner[r]]` row by row.
    pub fn scale_shift(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        owner: Arc<Vec<usize>>,
        offset: f64,
    ) -> Result<Var> {
        let (n, c) = self.shape(x);
        self.check_rows(scale, n, c, &owner, "scale_shift")?;
        self.check_rows(shift, n, c, &owner, "scale_shift")?;
        let off = T::of(offset);
        let (sc, sh) = (self.value(scale), self.value(shift));
        let mut y = self.value(x).to_owned();
        for (r, mut row) in y.rows_mut().into_iter().enumerate() {
            let o = owner[r];
            Zip::from(&mut row)
                .and(sc.row(o))
                .and(sh.row(o))
                .for_each(|y, &a, &b| *y = *y * (off + a) + b);
        }
        self.push(
            y,
            Op::ScaleShift {
                x,
                scale,
                shift,
                owner,
                offset: off,
            },
            "scale_shift",
        )
    }

    /// `x + gate[owner[r]] * u` row by row.
    pub fn gated_add(&mut self, x: Var, gate: Var, u: Var, owner: Arc<Vec<usize>>) -> Result<Var> {
        self.check_same(x, u, "gated_add")?;
        let (n, c) = self.shape(x);
        self.check_rows(gate, n, c, &owner, "gated_add")?;
        let (g, uv) = (self.value(gate), self.value(u));
        let mut y = self.value(x).to_owned();
        for (r, mut row) in y.rows_mut().into_iter().enumerate() {
            Zip::from(&mut row)
                .and(g.row(owner[r]))
                .and(uv.row(r))
                .for_each(|y, &a, &b| *y += a * b);
        }
        self.push(y, Op::GatedAdd { x, gate, u, owner }, "gated_add")
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(y, Op::Silu(a), "silu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).mapv(sigmoid);
        self.push(y, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).mapv(|v| v.tanh());
        self.push(y, Op::Tanh(a), "tanh")
    }

    /// Per-row normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = xv.dim();
        let mut y = Array2::zeros((n, c));
        let mut rstd = Vec::with_capacity(n);
        let cf = T::of(c as f64);
        for (row, mut out) in xv.rows().into_iter().zip(y.rows_mut()) {
            let mean = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            Zip::from(&mut out)
                .and(&row)
                .for_each(|o, &v| *o = (v - mean) * r);
            rstd.push(r);
        }
        self.push(y, Op::LayerNorm { x, rstd }, "layer_norm")
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
    /// `v`, with a softmax over each group's keys per head.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Arc<AttnLayout>,
    ) -> Result<Var> {
        let (nq, c) = self.shape(q);
        let (nk, ck) = self.shape(k);
        if heads == 0
            || c % heads != 0
            || ck != c
            || self.shape(v) != (nk, c)
            || layout.n_q != nq
            || layout.n_k != nk
        {
            return Err(Error::Shape {
                op: "attention",
                detail: format!(
                    "q {nq}x{c}, k {nk}x{ck}, v {:?}, heads {heads}",
                    self.shape(v)
                ),
            });
        }
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qs = self.value(q).as_standard_layout().into_owned();
        let ks = self.value(k).as_standard_layout().into_owned();
        let vs = self.value(v).as_standard_layout().into_owned();
        let (qd, kd, vd) = (
            qs.as_slice().unwrap(),
            ks.as_slice().unwrap(),
            vs.as_slice().unwrap(),
        );
        let mut out = Array2::<T>::zeros((nq, c));
        let od = out.as_slice_mut().unwrap();
        let mut probs = Vec::with_capacity(layout.prob_len(heads));
        let mut scores = Vec::new();
        for (qrows, krows) in &layout.groups {
            for h in 0..heads {
                let off = h * dh;
                for &qi in qrows {
                    let qrow = &qd[qi * c + off..qi * c + off + dh];
                    scores.clear();
                    let mut mx = T::neg_infinity();
                    for &kj in krows {
                        let sc = dot(qrow, &kd[kj * c + off..kj * c + off + dh]) * scale;
                        mx = mx.max(sc);
                        scores.push(sc);
                    }
                    let mut z = T::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - mx).fexp();
                        z += *sc;
                    }
                    let inv = T::one() / z;
                    let orow = &mut od[qi * c + off..qi * c + off + dh];
                    for (&kj, sc) in krows.iter().zip(scores.iter()) {
                        let p = *sc * inv;
                        probs.push(p);
                        axpy(p, &vd[kj * c + off..kj * c + off + dh], orow);
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            "attention",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "row counts differ".into(),
            });
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape {
            op: "concat_cols",
            detail: e.to_string(),
        })?;
        self.push(y, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape {
            op: "concat_rows",
            detail: e.to_string(),
        })?;
        self.push(y, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        if start + width > self.shape(a).1 {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("{start}+{width} > {}", self.shape(a).1),
            });
        }
        let y = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(y, Op::SliceCols(a, start), "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.shape(a).0 {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("{start}+{len} > {}", self.shape(a).0),
            });
        }
        let y = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(y, Op::SliceRows(a, start), "slice_rows")
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{r}x{c} -> {rows}x{cols}"),
            });
        }
        let flat: Vec<T> = self.value(a).iter().copied().collect();
        let y = Array2::from_shape_vec((rows, cols), flat).expect("size checked");
        self.push(y, Op::Reshape(a), "reshape")
    }

    /// Mean over consecutive blocks of `seg` rows.
    pub fn segment_mean(&mut self, a: Var, seg: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if seg == 0 || r % seg != 0 {
            return Err(Error::Shape {
                op: "segment_mean",
                detail: format!("{r} rows by {seg}"),
            });
        }
        let av = self.value(a);
        let mut y = Array2::zeros((r / seg, c));
        let inv = T::of(1.0 / seg as f64);
        for (i, mut out) in y.rows_mut().into_iter().enumerate() {
            for j in 0..seg {
                out.scaled_add(inv, &av.row(i * seg + j));
            }
        }
        self.push(y, Op::SegmentMean(a, seg), "segment_mean")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(y, Op::Sum(a), "sum")
    }

    /// `Σ_r w_r ‖a_r‖²`.
    pub fn row_weighted_sq(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.shape(a).0 {
            return Err(Error::Shape {
                op: "row_weighted_sq",
                detail: "weight count".into(),
            });
        }
        let w: Vec<T> = weights.into_iter().map(T::of).collect();
        let total = self
            .value(a)
            .rows()
            .into_iter()
            .zip(&w)
            .map(|(r, &wi)| wi * r.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::RowWeightedSq(a, w),
            "row_weighted_sq",
        )
    }

    /// `Σ_r w_r sqrt(‖a_r‖² + eps²)`.
    pub fn charbonnier(&mut self, a: Var, weights: Vec<f64>, eps: f64) -> Result<Var> {
        if weights.len() != self.shape(a).0 {
            return Err(Error::Shape {
                op: "charbonnier",
                detail: "weight count".into(),
            });
        }
        let w: Vec<T> = weights.into_iter().map(T::of).collect();
        let e = T::of(eps);
        let total = self
            .value(a)
            .rows()
            .into_iter()
            .zip(&w)
            .map(|(r, &wi)| wi * (r.iter().map(|&v| v * v).sum::<T>() + e * e).sqrt())
            .sum::<T>();
        self.push(
            Array2::from_elem((1, 1), total),
            Op::Charbonnier {
                x: a,
                weights: w,
                eps: e,
            },
            "charbonnier",
        )
    }

    /// Summed binary cross-entropy of logits `z` against targets `y`.
    pub fn bce_logits(&mut self, z: Var, y: Array2<f64>) -> Result<Var> {
        if y.dim() != self.shape(z) {
            return Err(Error::Shape {
                op: "bce_logits",
                detail: "target shape".into(),
            });
        }
        let y = y.mapv(T::of);
        let total = Zip::from(self.value(z))
            .and(&y)
            .fold(T::zero(), |acc, &zv, &yv| {
                acc + zv.max(T::zero()) - zv * yv + (T::one() + (-zv.abs()).exp()).ln()
            });
        self.push(
            Array2::from_elem((1, 1), total),
            Op::BceLogits { z, y },
            "bce_logits",
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss shape {:?}", self.shape(loss)),
            });
        }
        self.check_finite(loss)?;
        let mut g: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param => {
                    g[i] = Some(dy);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    acc(&mut g, *x, dy.dot(&self.value(*w).t()));
                    acc(&mut g, *w, self.value(*x).t().dot(&dy));
                    if let Some(b) = b {
                        acc(&mut g, *b, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, dy.mapv(|v| -v));
                    acc(&mut g, *a, dy);
                }
                Op::Mul(a, b) => {
                    acc(&mut g, *a, &dy * self.value(*b));
                    acc(&mut g, *b, &dy * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut g, *row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut g, *a, dy);
                }
                Op::Gather(a, idx) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    for (o, &src) in idx.iter().enumerate() {
                        let mut r = da.row_mut(src);
                        r += &dy.row(o);
                    }
                    acc(&mut g, *a, da);
                }
                Op::Scale(a, s) => acc(&mut g, *a, dy * *s),
                Op::AddScalar(a) => acc(&mut g, *a, dy),
                Op::Gelu(a) => {
                    let mut d = dy;
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut g, *a, d);
                }
                Op::ScaleShift {
                    x,
                    scale,
                    shift,
                    owner,
                    offset,
                } => {
                    let (sc, xv) = (self.value(*scale), self.value(*x));
                    let mut dsc = Array2::zeros(sc.dim());
                    let mut dsh = Array2::zeros(sc.dim());
                    let mut dx = dy;
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let o = owner[r];
                        Zip::from(dsc.row_mut(o))
                            .and(&row)
                            .and(xv.row(r))
                            .for_each(|g, &d, &xv| *g += d * xv);
                        dsh.row_mut(o).zip_mut_with(&row, |g, &d| *g += d);
                        Zip::from(&mut row)
                            .and(sc.row(o))
                            .for_each(|d, &s| *d *= *offset + s);
                    }
                    acc(&mut g, *scale, dsc);
                    acc(&mut g, *shift, dsh);
                    acc(&mut g, *x, dx);
                }
                Op::GatedAdd { x, gate, u, owner } => {
                    let (gv, uv) = (self.value(*gate), self.value(*u));
                    let mut dg = Array2::zeros(gv.dim());
                    let mut du = dy.clone();
                    for (r, mut row) in du.rows_mut().into_iter().enumerate() {
                        let o = owner[r];
                        Zip::from(dg.row_mut(o))
                            .and(&row)
                            .and(uv.row(r))
                            .for_each(|g, &d, &u| *g += d * u);
                        row.zip_mut_with(&gv.row(o), |d, &s| *d *= s);
                    }
                    acc(&mut g, *gate, dg);
                    acc(&mut g, *u, du);
                    acc(&mut g, *x, dy);
                }
                Op::Silu(a) => {
                    let mut d = dy;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (T::one() + x * (T::one() - s));
                    });
                    acc(&mut g, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = dy;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (T::one() - y));
                    acc(&mut g, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = dy;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= T::one() - y * y);
                    acc(&mut g, *a, d);
                }
                Op::LayerNorm { x, rstd } => {
                    let xhat = &node.value;
                    let (n, c) = xhat.dim();
                    let cf = T::of(c as f64);
                    let mut dx = Array2::zeros((n, c));
                    for r in 0..n {
                        let dyr = dy.row(r);
                        let xr = xhat.row(r);
                        let m1 = dyr.sum() / cf;
                        let m2 = dyr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / cf;
                        let rs = rstd[r];
                        Zip::from(dx.row_mut(r))
                            .and(&dyr)
                            .and(&xr)
                            .for_each(|o, &d, &xh| *o = rs * (d - m1 - xh * m2));
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) =
                        self.attention_backward(&dy, *q, *k, *v, *heads, layout, probs);
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut g, p, dy.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut g, p, dy.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    let w = dy.dim().1;
                    da.slice_mut(s![.., *start..*start + w]).assign(&dy);
                    acc(&mut g, *a, da);
                }
                Op::SliceRows(a, start) => {
                    let mut da = Array2::zeros(self.shape(*a));
                    let h = dy.dim().0;
                    da.slice_mut(s![*start..*start + h, ..]).assign(&dy);
                    acc(&mut g, *a, da);
                }
                Op::Reshape(a) => {
                    let flat: Vec<T> = dy.iter().copied().collect();
                    acc(
                        &mut g,
                        *a,
                        Array2::from_shape_vec(self.shape(*a), flat).expect("same size"),
                    );
                }
                Op::SegmentMean(a, seg) => {
                    let inv = T::of(1.0 / *seg as f64);
                    let (r, c) = self.shape(*a);
                    let mut da = Array2::zeros((r, c));
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        row.scaled_add(inv, &dy.row(i / seg));
                    }
                    acc(&mut g, *a, da);
                }
                Op::Sum(a) => {
                    let s = dy[[0, 0]];
                    acc(&mut g, *a, Array2::from_elem(self.shape(*a), s));
                }
                Op::RowWeightedSq(a, w) => {
                    let s = dy[[0, 0]];
                    let mut da = self.value(*a).to_owned();
                    for (mut row, &wi) in da.rows_mut().into_iter().zip(w) {
                        row *= T::of(2.0) * wi * s;
                    }
                    acc(&mut g, *a, da);
                }
                Op::Charbonnier { x, weights, eps } => {
                    let s = dy[[0, 0]];
                    let mut da = self.value(*x).to_owned();
                    for (mut row, &wi) in da.rows_mut().into_iter().zip(weights) {
                        let den = (row.iter().map(|&v| v * v).sum::<T>() + *eps * *eps).sqrt();
                        row *= wi * s / den;
                    }
                    acc(&mut g, *x, da);
                }
                Op::BceLogits { z, y } => {
                    let s = dy[[0, 0]];
                    let mut dz = self.value(*z).mapv(sigmoid);
                    dz -= y;
                    acc(&mut g, *z, dz * s);
                }
            }
        }
        Ok(Grads { grads: g })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        dy: &Array2<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttnLayout,
        probs: &[T],
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let (nq, c) = self.shape(q);
        let nk = self.shape(k).0;
        let dh = c / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let qs = self.value(q).as_standard_layout().into_owned();
        let ks = self.value(k).as_standard_layout().into_owned();
        let vs = self.value(v).as_standard_layout().into_owned();
        let dys = dy.as_standard_layout().into_owned();
        let (qd, kd, vd, dd) = (
            qs.as_slice().unwrap(),
            ks.as_slice().unwrap(),
            vs.as_slice().unwrap(),
            dys.as_slice().unwrap(),
        );
        let mut dq = Array2::<T>::zeros((nq, c));
        let mut dk = Array2::<T>::zeros((nk, c));
        let mut dv = Array2::<T>::zeros((nk, c));
        let (dqd, dkd, dvd) = (
            dq.as_slice_mut().unwrap(),
            dk.as_slice_mut().unwrap(),
            dv.as_slice_mut().unwrap(),
        );
        let mut pi = 0;
        let mut dp = Vec::new();
        for (qrows, krows) in &layout.groups {
            for h in 0..heads {
                let off = h * dh;
                for &qi in qrows {
                    let p = &probs[pi..pi + krows.len()];
                    pi += krows.len();
                    let dorow = &dd[qi * c + off..qi * c + off + dh];
                    dp.clear();
                    let mut pd = T::zero();
                    for (&kj, &pj) in krows.iter().zip(p) {
                        let d = dot(dorow, &vd[kj * c + off..kj * c + off + dh]);
                        dp.push(d);
                        pd += pj * d;
                        axpy(pj, dorow, &mut dvd[kj * c + off..kj * c + off + dh]);
                    }
                    let qrow = &qd[qi * c + off..qi * c + off + dh];
                    for ((&kj, &pj), &dpj) in krows.iter().zip(p).zip(&dp) {
                        let ds = pj * (dpj - pd) * scale;
                        let kr = kj * c + off..kj * c + off + dh;
                        axpy(
                            ds,
                            &kd[kr.clone()],
                            &mut dqd[qi * c + off..qi * c + off + dh],
                        );
                        axpy(ds, qrow, &mut dkd[kr]);
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn acc<T: Real>(g: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
    match &mut g[v.0] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of a leaf or parameter (`None` when it did not influence the
    /// loss).
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter on the tape, in 64-bit.
    pub fn params(&self, tape: &Tape<'_, T>) -> Vec<(ParamId, Array2<f64>)> {
        let mut out: Vec<(ParamId, Array2<f64>)> = tape
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = match &self.grads[v.0] {
                    Some(g) => g.mapv(|x| x.f64()),
                    None => Array2::zeros(tape.shape(v)),
                };
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_tracks_std() {
        for i in -8000..=8000 {
            let x = i as f32 * 0.01;
            let (a, b) = (exp_f32(x), x.exp());
            assert!(((a - b) / b).abs() < 1e-6, "x={x} {a} {b}");
        }
        assert!(exp_f32(f32::NAN).is_nan());
        assert!(exp_f32(-1e4) >= 0.0 && exp_f32(1e4).is_finite());
    }

    #[test]
    fn fused_row_ops_by_hand() {
        let store = ParamStore::new(0);
        let mut t = Tape::<f64>::new(&store);
        let x = t
            .input(ndarray::array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
            .unwrap();
        let sc = t.input(ndarray::array![[1.0, -1.0], [0.5, 2.0]]).unwrap();
        let sh = t.input(ndarray::array![[0.0, 1.0], [10.0, 20.0]]).unwrap();
        let owner = Arc::new(vec![1, 0, 1]);
        let y = t.scale_shift(x, sc, sh, owner.clone(), 1.0).unwrap();
        assert_eq!(
            t.value(y),
            &ndarray::array![[11.5, 26.0], [6.0, 1.0], [17.5, 38.0]]
        );
        let z = t.gated_add(x, sc, x, owner).unwrap();
        assert_eq!(
            t.value(z),
            &ndarray::array![[1.5, 6.0], [6.0, 0.0], [7.5, 18.0]]
        );
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(sh).unwrap(), &ndarray::array![[1.0, 1.0], [2.0, 2.0]]);
        assert_eq!(g.wrt(sc).unwrap(), &ndarray::array![[3.0, 4.0], [6.0, 8.0]]);
        assert_eq!(
            g.wrt(x).unwrap(),
            &ndarray::array![[1.5, 3.0], [2.0, 0.0], [1.5, 3.0]]
        );
    }

    #[test]
    fn non_finite_is_reported_by_origin() {
        let store = ParamStore::new(0);
        let mut t = Tape::<f64>::new(&store);
        let x = t.input(ndarray::array![[f64::INFINITY]]).unwrap();
        let y = t.scale(x, 0.0).unwrap();
        let s = t.sum(y).unwrap();
        assert!(matches!(t.backward(s), Err(Error::NonFinite(n)) if n == "input"));
    }
}

//! Flow tensors, normalization statistics and action chunks.
//!
//! A flow is `K` keyframes of `N` keypoint positions in world coordinates,
//! stored keyframe-major (`values[(k * N + n) * 3 + axis]`), together with a
//! per-(keyframe, keypoint) visibility weight in `[0, 1]`.

use std::io::{Read, Write};

use crate::binio;
use crate::error::{Error, Result};

pub const FLOW_MAGIC: &[u8; 4] = b"F4D1";

/// Lower bound applied to the isotropic normalization scale.
pub const MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTensor {
    k: usize,
    n: usize,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl FlowTensor {
    pub fn new(k: usize, n: usize, values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let flow = Self {
            k,
            n,
            values,
            weights,
        };
        flow.validate()?;
        Ok(flow)
    }

    /// Builds a flow with every weight set to 1.
    pub fn with_unit_weights(k: usize, n: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(k, n, values, vec![1.0; k * n])
    }

    pub fn zeros(k: usize, n: usize) -> Self {
        Self {
            k,
            n,
            values: vec![0.0; k * n * 3],
            weights: vec![1.0; k * n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidFlow(format!("K = {} < 2", self.k)));
        }
        if self.n < 1 {
            return Err(Error::InvalidFlow("N = 0".into()));
        }
        if self.values.len() != self.k * self.n * 3 {
            return Err(Error::InvalidFlow(format!(
                "values has {} entries, expected {}",
                self.values.len(),
                self.k * self.n * 3
            )));
        }
        if self.weights.len() != self.k * self.n {
            return Err(Error::InvalidFlow(format!(
                "weights has {} entries, expected {}",
                self.weights.len(),
                self.k * self.n
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidFlow(format!("non-finite value at index {i}")));
        }
        if let Some(i) = self.weights.iter().position(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidFlow(format!(
                "weight {} out of [0,1] at index {i}",
                self.weights[i]
            )));
        }
        Ok(())
    }

    pub fn keyframes(&self) -> usize {
        self.k
    }

    pub fn keypoints(&self) -> usize {
        self.n
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn point(&self, k: usize, n: usize) -> [f64; 3] {
        let i = (k * self.n + n) * 3;
        [self.values[i], self.values[i + 1], self.values[i + 2]]
    }

    pub fn weight(&self, k: usize, n: usize) -> f64 {
        self.weights[k * self.n + n]
    }

    /// Weighted centroid of the keypoints at keyframe `k` (plain mean when all
    /// weights are zero).
    pub fn centroid(&self, k: usize) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for n in 0..self.n {
            let w = self.weight(k, n);
            let p = self.point(k, n);
            for a in 0..3 {
                acc[a] += w * p[a];
            }
            wsum += w;
        }
        if wsum <= 0.0 {
            let mut acc = [0.0; 3];
            for n in 0..self.n {
                let p = self.point(k, n);
                for a in 0..3 {
                    acc[a] += p[a] / self.n as f64;
                }
            }
            return acc;
        }
        acc.map(|v| v / wsum)
    }

    /// Returns a copy with new values and the same weights.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.k, self.n, values, self.weights.clone())
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.k, self.n, self.values.clone(), weights)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(FLOW_MAGIC)?;
        binio::write_u32(w, self.k as u32)?;
        binio::write_u32(w, self.n as u32)?;
        for &v in &self.values {
            binio::write_f32(w, v as f32)?;
        }
        for &v in &self.weights {
            binio::write_f32(w, v as f32)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, FLOW_MAGIC)?;
        let k = binio::read_len(r, 1 << 16, "K")?;
        let n = binio::read_len(r, 1 << 16, "N")?;
        let mut values = Vec::with_capacity(k * n * 3);
        for _ in 0..k * n * 3 {
            values.push(binio::read_f32(r)? as f64);
        }
        let mut weights = Vec::with_capacity(k * n);
        for _ in 0..k * n {
            weights.push(binio::read_f32(r)? as f64);
        }
        Self::new(k, n, values, weights)
    }

    /// Rounds every value and weight to the nearest 32-bit float, which makes
    /// the tensor survive a write/read cycle bit-exactly.
    pub fn quantized(&self) -> Self {
        Self {
            k: self.k,
            n: self.n,
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
            weights: self.weights.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub center: [f64; 3],
    pub scale: f64,
}

impl NormStats {
    pub fn new(center: [f64; 3], scale: f64) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid norm stats {center:?} / {scale}"
            )));
        }
        Ok(Self { center, scale })
    }

    pub fn identity() -> Self {
        Self {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for c in self.center {
            binio::write_f64(w, c)?;
        }
        binio::write_f64(w, self.scale)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let center = [
            binio::read_f64(r)?,
            binio::read_f64(r)?,
            binio::read_f64(r)?,
        ];
        let scale = binio::read_f64(r)?;
        Self::new(center, scale)
    }
}

/// Center is the mean first-keyframe keypoint position over the dataset; scale
/// is the standard deviation of every centered coordinate, floored at
/// [`MIN_SCALE`].
pub fn compute_norm_stats(dataset: &[FlowTensor]) -> Result<NormStats> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for f in dataset {
        f.validate()?;
    }
    let mut center = [0.0; 3];
    let mut count = 0usize;
    for f in dataset {
        for n in 0..f.n {
            let p = f.point(0, n);
            for a in 0..3 {
                center[a] += p[a];
            }
            count += 1;
        }
    }
    let center = center.map(|c| c / count as f64);
    let mut sq = 0.0;
    let mut total = 0usize;
    for f in dataset {
        for (i, v) in f.values.iter().enumerate() {
            let d = v - center[i % 3];
            sq += d * d;
            total += 1;
        }
    }
    let scale = (sq / total as f64).sqrt().max(MIN_SCALE);
    NormStats::new(center, scale)
}

pub fn normalize(flow: &FlowTensor, stats: &NormStats) -> FlowTensor {
    let values = flow
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - stats.center[i % 3]) / stats.scale)
        .collect();
    FlowTensor {
        k: flow.k,
        n: flow.n,
        values,
        weights: flow.weights.clone(),
    }
}

pub fn denormalize(flow: &FlowTensor, stats: &NormStats) -> FlowTensor {
    let values = flow
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| v * stats.scale + stats.center[i % 3])
        .collect();
    FlowTensor {
        k: flow.k,
        n: flow.n,
        values,
        weights: flow.weights.clone(),
    }
}

/// `H` low-level steps: per-step end-effector displacement and a gripper
/// command in `[0, 1]` (1 = closed).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub deltas: Vec<[f64; 3]>,
    pub gripper: Vec<f64>,
}

impl ActionChunk {
    pub fn new(deltas: Vec<[f64; 3]>, gripper: Vec<f64>) -> Result<Self> {
        let chunk = Self { deltas, gripper };
        chunk.validate()?;
        Ok(chunk)
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() || self.deltas.len() != self.gripper.len() {
            return Err(Error::InvalidArgument(format!(
                "action chunk with {} deltas and {} gripper entries",
                self.deltas.len(),
                self.gripper.len()
            )));
        }
        if self.deltas.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("action chunk".into()));
        }
        if self.gripper.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::InvalidArgument(
                "gripper command outside [0,1]".into(),
            ));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.deltas.len()
    }

    /// The 4-vector action for step `i`.
    pub fn action(&self, i: usize) -> [f64; 4] {
        let d = self.deltas[i];
        [d[0], d[1], d[2], self.gripper[i]]
    }
}

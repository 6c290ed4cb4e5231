//! Dataset container and its binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! "F4DS" | version u32 | K u32 | N u32 | D_obs u32 | H u32 | pairs u32
//! NormStats: center 3×f64, scale f64
//! per pair:
//!   condition_frame u32 | task_id u32 | seg_start u32 | seg_end u32 | seg_state u32
//!   observation D_obs×f32
//!   has_query u32 [ N×2 f32 ]
//!   FlowTensor ("F4D1" block)
//!   samples u32, per sample: offset u32 | observation D_obs×f32 | proprio 4×f32 | chunk H×4 f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AtomicSegment, PolicySample, TrainingPair};
use crate::binio::{self, read_f32, read_len, read_u32, write_f32, write_u32};
use crate::closedloop::world::{OBS_DIM, PROPRIO_DIM};
use crate::error::{Error, Result};
use crate::flow::{compute_norm_stats, ActionChunk, FlowTensor, NormStats};

pub const DATASET_MAGIC: &[u8; 4] = b"F4DS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stats: NormStats,
    pub k: usize,
    pub n: usize,
    pub horizon: usize,
    pub pairs: Vec<TrainingPair>,
}

impl Dataset {
    pub fn from_pairs(pairs: Vec<TrainingPair>, horizon: usize) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyDataset)?;
        let (k, n) = (first.target.keyframes(), first.target.keypoints());
        if pairs
            .iter()
            .any(|p| p.target.keyframes() != k || p.target.keypoints() != n)
        {
            return Err(Error::InvalidArgument("pairs disagree on K or N".into()));
        }
        let targets: Vec<FlowTensor> = pairs.iter().map(|p| p.target.clone()).collect();
        let stats = compute_norm_stats(&targets)?;
        Ok(Self {
            stats,
            k,
            n,
            horizon,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Deterministic split: every `every`-th pair (by index) is held out.
    pub fn split_holdout(&self, every: usize) -> (Vec<&TrainingPair>, Vec<&TrainingPair>) {
        let every = every.max(2);
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, p) in self.pairs.iter().enumerate() {
            if i % every == every - 1 {
                held.push(p);
            } else {
                train.push(p);
            }
        }
        (train, held)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.k as u32)?;
        write_u32(w, self.n as u32)?;
        write_u32(w, OBS_DIM as u32)?;
        write_u32(w, self.horizon as u32)?;
        write_u32(w, self.pairs.len() as u32)?;
        self.stats.write(w)?;
        for p in &self.pairs {
            write_u32(w, p.condition_frame as u32)?;
            write_u32(w, p.task_id as u32)?;
            write_u32(w, p.segment.start as u32)?;
            write_u32(w, p.segment.end as u32)?;
            write_u32(w, p.segment.gripper_state as u32)?;
            for &v in &p.observation {
                write_f32(w, v as f32)?;
            }
            match &p.query_points {
                Some(q) => {
                    write_u32(w, 1)?;
                    for pt in q {
                        write_f32(w, pt[0] as f32)?;
                        write_f32(w, pt[1] as f32)?;
                    }
                }
                None => write_u32(w, 0)?,
            }
            p.target.write(w)?;
            write_u32(w, p.policy_samples.len() as u32)?;
            for s in &p.policy_samples {
                write_u32(w, s.offset as u32)?;
                for &v in s.observation.iter().chain(&s.proprio) {
                    write_f32(w, v as f32)?;
                }
                for i in 0..self.horizon {
                    for v in s.chunk.action(i) {
                        write_f32(w, v as f32)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::expect_magic(r, DATASET_MAGIC)?;
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let k = read_len(r, 1 << 12, "K")?;
        let n = read_len(r, 1 << 12, "N")?;
        let d_obs = read_u32(r)? as usize;
        if d_obs != OBS_DIM {
            return Err(Error::Format(format!("D_obs {d_obs} != {OBS_DIM}")));
        }
        let horizon = read_len(r, 1 << 12, "H")?;
        let count = read_len(r, 1 << 26, "pair count")?;
        let stats = NormStats::read(r)?;
        let mut pairs = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let condition_frame = read_u32(r)? as usize;
            let task_id = read_u32(r)? as usize;
            let start = read_u32(r)? as usize;
            let end = read_u32(r)? as usize;
            let gripper_state = read_u32(r)? as u8;
            if start > end || gripper_state > 1 {
                return Err(Error::Format(format!(
                    "bad segment [{start}, {end}] state {gripper_state}"
                )));
            }
            let observation = read_obs(r)?;
            let query_points = match read_u32(r)? {
                0 => None,
                1 => {
                    let mut q = Vec::with_capacity(n);
                    for _ in 0..n {
                        q.push([read_f32(r)? as f64, read_f32(r)? as f64]);
                    }
                    Some(q)
                }
                other => return Err(Error::Format(format!("bad query flag {other}"))),
            };
            let target = FlowTensor::read(r)?;
            if target.keyframes() != k || target.keypoints() != n {
                return Err(Error::Format("flow shape disagrees with header".into()));
            }
            let ns = read_len(r, 1 << 10, "policy samples")?;
            let mut policy_samples = Vec::with_capacity(ns);
            for _ in 0..ns {
                let offset = read_u32(r)? as usize;
                let observation = read_obs(r)?;
                let mut proprio = [0.0; PROPRIO_DIM];
                for v in &mut proprio {
                    *v = read_f32(r)? as f64;
                }
                let mut deltas = Vec::with_capacity(horizon);
                let mut gripper = Vec::with_capacity(horizon);
                for _ in 0..horizon {
                    deltas.push([
                        read_f32(r)? as f64,
                        read_f32(r)? as f64,
                        read_f32(r)? as f64,
                    ]);
                    gripper.push(read_f32(r)? as f64);
                }
                let chunk = ActionChunk::new(deltas, gripper)?;
                policy_samples.push(PolicySample {
                    offset,
                    observation,
                    proprio,
                    chunk,
                });
            }
            pairs.push(TrainingPair {
                condition_frame,
                observation,
                task_id,
                query_points,
                target,
                segment: AtomicSegment {
                    start,
                    end,
                    gripper_state,
                },
                policy_samples,
            });
        }
        Ok(Self {
            stats,
            k,
            n,
            horizon,
            pairs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

fn read_obs<R: Read>(r: &mut R) -> Result<[f64; OBS_DIM]> {
    let mut o = [0.0; OBS_DIM];
    for v in &mut o {
        *v = read_f32(r)? as f64;
        if !v.is_finite() {
            return Err(Error::Format("non-finite observation".into()));
        }
    }
    Ok(o)
}

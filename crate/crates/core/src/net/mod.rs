//! Differentiable building blocks and the flow planner network.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;
pub mod tape;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use model::{
    denoise, encode_condition, encode_condition_vars, init_params, ConditionBundle, EncodedCond,
};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{AttnLayout, Grads, Real, Tape, Var};

use crate::closedloop::world::{OBS_DIM, TASK_VOCAB};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Channel width `C`.
    pub c: usize,
    pub heads: usize,
    pub n_local: usize,
    pub n_3d: usize,
    pub dit_depth: usize,
    pub resampler_blocks: usize,
    /// Leading DiT blocks that cross-attend to the context tokens.
    pub cross_blocks: usize,
    /// Tokens produced by the frozen featurizer.
    pub feat_tokens: usize,
    pub mlp_ratio: usize,
    /// Keyframes `K` and keypoints `N` of the flows this network models.
    pub k: usize,
    pub n: usize,
    pub d_obs: usize,
    pub d_teacher: usize,
    pub vocab: usize,
    /// Frame-axis attention before keypoint-axis attention.
    pub frame_first: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            c: 64,
            heads: 4,
            n_local: 8,
            n_3d: 4,
            dit_depth: 4,
            resampler_blocks: 2,
            cross_blocks: 2,
            feat_tokens: 16,
            mlp_ratio: 2,
            k: 8,
            n: 16,
            d_obs: OBS_DIM,
            d_teacher: 32,
            vocab: TASK_VOCAB,
            frame_first: true,
        }
    }
}

impl NetConfig {
    /// A narrow configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            c: 8,
            heads: 2,
            n_local: 3,
            n_3d: 2,
            dit_depth: 2,
            resampler_blocks: 1,
            cross_blocks: 1,
            feat_tokens: 4,
            mlp_ratio: 2,
            k: 3,
            n: 2,
            d_obs: OBS_DIM,
            d_teacher: 4,
            vocab: TASK_VOCAB,
            frame_first: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.c,
            self.heads,
            self.n_local,
            self.n_3d,
            self.dit_depth,
            self.resampler_blocks,
            self.feat_tokens,
            self.mlp_ratio,
            self.k,
            self.n,
            self.d_obs,
            self.d_teacher,
            self.vocab,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(
                "network sizes must be at least 1".into(),
            ));
        }
        if self.c % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "C={} not divisible by heads={}",
                self.c, self.heads
            )));
        }
        if self.c % 2 != 0 {
            return Err(Error::InvalidArgument("C must be even".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument("K must be at least 2".into()));
        }
        if self.d_obs != OBS_DIM {
            return Err(Error::InvalidArgument(format!("D_obs must be {OBS_DIM}")));
        }
        Ok(())
    }

    /// Width of the fused condition token.
    pub fn cond_dim(&self) -> usize {
        4 * self.c
    }
}

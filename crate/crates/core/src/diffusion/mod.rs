//! Conditional diffusion over flow tensors with v-prediction.

pub mod losses;
pub mod sample;
pub mod train;

pub use losses::{loss_align, loss_diff, loss_smooth, total_loss, Batch, LossParts};
pub use sample::{sample_flow, sample_flows, SampleConfig};
pub use train::{train, Adam, TrainConfig, TrainReport};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::InvalidArgument(format!("unknown schedule {other}"))),
        }
    }
}

pub const COSINE_OFFSET: f64 = 0.008;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    /// `alpha_bar[t]` for `t = 0..=T`, with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }
}

/// Builds `ᾱ_0..ᾱ_T`.
///
/// The cosine schedule takes per-step ratios of the squared-cosine curve as
/// `1 - β_t`, clips `β_t` at [`MAX_BETA`] and accumulates the product, which
/// keeps the sequence strictly decreasing all the way to `t = T`.
pub fn build_schedule(t_max: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Cosine => {
            let s = COSINE_OFFSET;
            let f = |t: usize| {
                ((t as f64 / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=t_max)
                .map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 0.02);
            (1..=t_max)
                .map(|i| {
                    if t_max == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * (i - 1) as f64 / (t_max - 1) as f64
                    }
                })
                .collect()
        }
    };
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for b in betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule { kind, alpha_bar })
}

fn check_len(a: &[f64], b: &[f64], op: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// `x_t = √ᾱ x0 + √(1-ᾱ) ε`.
pub fn forward_diffuse(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_len(x0, eps, "forward_diffuse")?;
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + s * e).collect())
}

/// `v = √ᾱ ε - √(1-ᾱ) x0`.
pub fn v_target(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_len(x0, eps, "v_target")?;
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * e - s * x).collect())
}

/// `x̂0 = √ᾱ x_t - √(1-ᾱ) v`.
pub fn recover_x0(x_t: &[f64], v: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_len(x_t, v, "recover_x0")?;
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x_t.iter().zip(v).map(|(&x, &vv)| a * x - s * vv).collect())
}

/// Noise implied by `v` at `x_t`: `ε̂ = √(1-ᾱ) x_t + √ᾱ v`.
pub fn implied_noise(x_t: &[f64], v: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
    check_len(x_t, v, "implied_noise")?;
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x_t.iter().zip(v).map(|(&x, &vv)| s * x + a * vv).collect())
}

/// `v̂ = (1+w) v_c - w v_u`, evaluated as `v_c + w (v_c - v_u)` so that
/// equal branches and `w = 0` return `v_c` exactly.
pub fn cfg_combine(v_cond: &[f64], v_uncond: &[f64], w: f64) -> Result<Vec<f64>> {
    check_len(v_cond, v_uncond, "cfg_combine")?;
    Ok(v_cond
        .iter()
        .zip(v_uncond)
        .map(|(&c, &u)| c + w * (c - u))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_smooth: f64,
    pub charbonnier_eps: f64,
    pub p_uncond: f64,
    pub guidance_w: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 0.1,
            lambda_smooth: 0.05,
            charbonnier_eps: 1e-3,
            p_uncond: 0.1,
            guidance_w: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_align >= 0.0
            && self.lambda_smooth >= 0.0
            && self.charbonnier_eps > 0.0
            && (0.0..=1.0).contains(&self.p_uncond)
            && self.guidance_w >= 0.0
            && [
                self.lambda_align,
                self.lambda_smooth,
                self.charbonnier_eps,
                self.guidance_w,
            ]
            .iter()
            .all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid loss weights {self:?}"
            )));
        }
        Ok(())
    }
}

//! Goal-oriented keypoint flow planning: a conditional diffusion planner over
//! 3D keypoint trajectories, a flow-conditioned action policy, and a
//! slow/fast closed loop in a synthetic pick-and-place world.

pub mod binio;
pub mod cli;
pub mod closedloop;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod net;
pub mod policy;

pub use error::{Error, Result};

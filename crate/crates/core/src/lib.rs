//! Three-branch multimodal fusion network (RGB, laser distance map, point
//! cloud) regressing a steering command, plus the procedural simulator,
//! dataset tooling, trainer and evaluation used to train it.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod lasermap;
pub mod pnm;
pub mod cloudnet;
pub mod layers;
pub mod nmfnet;
pub mod simworld;
pub mod dataset;
pub mod trainer;
pub mod evaltools;
pub mod cli;

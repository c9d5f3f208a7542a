//! Score-distillation losses over pluggable denoisers and renderers.

pub mod backends;
pub mod calibration;
pub mod conditioning;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod inversion;
pub mod losses;
pub mod optim;
pub mod oracles;
pub mod registry;
pub mod render;
pub mod sgc;
pub mod tensor;
pub mod timestep;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod metrics;
pub mod network;
pub mod pgm;
pub mod scc;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{ModelConfig, Network};
pub use tensor::{Parameter, Tape, Tensor, Var};

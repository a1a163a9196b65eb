//! Multi-scale adaptive denoising network built on a self-contained
//! reverse-mode differentiation engine.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod reference;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{Denoiser, Model, ModelConfig, Passthrough, Variant};
pub use ops::ConvSpec;
pub use params::{Bindings, ParamStore};
pub use tensor::{Fill, Shape, Tensor};
pub use train::{TrainSchedule, Trainer};

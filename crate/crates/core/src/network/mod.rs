//! The network, its training objective, optimizers and checkpoints.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::{LossConfig, WindowTargets};
pub use model::{Bmn, BmnShape, ForwardOutput, Layer, ModelParams, OutputGrads, Tensor};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{train, Example, TrainConfig, TrainReport};

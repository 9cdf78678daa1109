//! Feed-forward networks and their optimizers.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use mlp::{input_gradient, Activation, BoundMlp, FnModel, Head, Mlp, MlpSpec, Model};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

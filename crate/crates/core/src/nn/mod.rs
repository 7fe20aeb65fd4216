//! Batch-normalized multilayer perceptron with hand-written forward and
//! backward passes.

pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod train;

pub use backward::{backward_entropy_objective, backward_from_logits, BnGrad, GradientSet};
pub use checkpoint::Checkpoint;
pub use forward::{forward, logits, ForwardCache, NormMode};
pub use layers::{Activation, ArchSpec, BatchNorm, Dense, Layer, LayerStack};
pub use ops::softmax_entropy;
pub use optim::{Optimizer, OptimizerKind};
pub use train::{evaluate_accuracy, train_source, LabeledData, TrainConfig};

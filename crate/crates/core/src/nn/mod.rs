//! Toy network composition: layer stacks of deformable convolutions with
//! pointwise layers, cross-entropy, Adam and segmentation metrics.

mod adam;
mod loss;
mod metrics;
mod stack;
mod train;

pub use adam::{adam_step, OptimizerState, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
pub use loss::{argmax_rows, cross_entropy};
pub use metrics::{evaluate, evaluate_prepared, metrics_from_predictions, predict, MetricsReport};
pub use stack::{stack_forward, Layer, LayerStack, Linear, Neighborhood, StackBuilder, Trace};
pub use train::{
    loss_and_grads, prepare, train, train_epoch, EpochLog, Prepared, TrainConfig,
};

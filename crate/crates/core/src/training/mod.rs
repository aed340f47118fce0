//! Loss, optimizer and the training loop.

mod adam;
mod loss;
mod trainer;

pub use adam::{model_groups, Adam, AdamConfig, AdamState, ParamGroup};
pub use loss::{one_hot, segmentation_loss, LossParts, LossWeights, DICE_SMOOTH};
pub use trainer::{
    make_batch, train, train_step, Batch, LrSchedule, OptimizerKind, TrainConfig, TrainOptions, TrainOutcome,
    LOG_FILE,
};

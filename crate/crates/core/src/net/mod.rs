//! Dense MLPs: evaluation, backpropagation, training, feature splits and
//! checkpoints.

mod checkpoint;
mod mlp;
mod split;
mod train;

pub use checkpoint::{
    checkpoint_from_str, checkpoint_to_string, load_checkpoint, save_checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use mlp::{flatten_grads, softmax, Activation, Forward, HeadLoss, Layer, LayerGrad, Mlp};
pub use split::{split_at, FeatureSplit};
pub use train::{train, Optimizer, TrainConfig, TrainOutcome};

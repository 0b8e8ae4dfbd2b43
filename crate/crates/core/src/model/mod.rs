//! The full network plus its labels, losses, optimiser and training loop.

pub mod labels;
pub mod loss;
pub mod network;
pub mod optim;
pub mod train;

pub use labels::{
    argmax, collapse_event, collapse_prong, softmax, EventClass, EventFlavor, Interaction, ProngClass, ProngKind,
    PRONG_RENORM_MIN,
};
pub use loss::{cross_entropy, focal_loss, joint_loss, FocalLoss};
pub use network::{EventOutput, Head, ModelConfig, SaliencyTarget, TransformerCvn, MAX_PRONGS};
pub use optim::{adamw_step, cosine_warm_restart_lr, AdamState, CosineWarmRestarts};
pub use train::{accuracy, evaluate, mean_loss, predict, train_epoch, Accuracy, EpochMetrics, Prediction, TrainConfig, TrainState};

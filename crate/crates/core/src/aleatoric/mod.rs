//! Learned per-structure variance of label-propagation residuals.

mod features;
mod file;
mod loss;
mod network;
mod train;

pub use features::{validate_kinds, FeatureKind, FeatureStack};
pub use file::{decode_head, encode_head, read_head, write_head, HeadModel, HEAD_MAGIC};
pub use loss::{beta_nll_loss, beta_nll_loss_with_weights, clamp_s, stop_gradient_weights, LossForm, LossValue, S_CLAMP};
pub use network::{
    backward, forward, BatchNorm, ConvLayer, ForwardPass, Gradients, HeadConfig, HeadParameters, Mode, BN_EPS,
    BN_MOMENTUM,
};
pub use train::{
    loss_and_gradients, loss_and_gradients_frozen, predict_aleatoric, predict_log_variance, train,
    write_loss_history, TrainConfig, TrainOutcome, TrainingPair,
};

//! Momentum contrastive training: the key queue, infoNCE with a norm
//! regularizer, optimizers, the momentum update and the training loop.

mod batch;
mod loss;
mod optim;
mod queue;
mod state;
mod train;

pub use batch::{batch_loss, batch_loss_value, BatchOutput, LossConfig};
pub use loss::{compute_logits, info_nce, info_nce_grad, norm_regularizer, LogitVector};
pub use optim::{momentum_update, OptimizerKind, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use queue::QueueMatrix;
pub use state::{decode_state, encode_state, load_training, save_training, sidecar_path};
pub use train::{history_csv, train, write_history_csv, EpochStats, TrainConfig, TrainState};

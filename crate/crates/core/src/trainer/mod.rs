//! Masked PPO: policy models, advantage estimation, the clipped loss and the
//! training loop.

pub mod gae;
pub mod policy;
pub mod ppo;
pub mod train;

pub use gae::compute_advantages;
pub use policy::{masked_distribution, PolicyActor, PolicyModel, StateKey, TabularPolicy};
pub use ppo::{gradient_check, loss, loss_and_grad, LossParts, PpoParams, Sample};
pub use train::{train, write_curves, CurveRow, TrainConfig, TrainReport, Worker};

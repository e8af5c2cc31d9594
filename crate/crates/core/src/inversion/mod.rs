//! Learned inversion: a quantile-bound network trained with the pinball
//! loss, and a direct regression baseline sharing the same trunk.

mod bounds;
mod net;
mod train;

pub use bounds::{validate_levels, Part, QuantileBounds, DEFAULT_LEVELS};
pub use net::{InputScaler, InvNet, InvNetSpec, NetKind, DEFAULT_HIDDEN, INPUT_CLIP};
pub use train::{pinball_loss, train_finv, train_lti, TrainedNet, TrainingRecord};

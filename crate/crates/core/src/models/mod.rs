//! Model zoo and training harness.

mod checkpoint;
mod regress;
mod spec;
mod train;

pub use checkpoint::{ModelCheckpoint, ModelKind};
pub use regress::{predict, predict_batch, train_regressor, RegressionObjective};
pub use spec::{Activation, Arch, Conditioning, ModelSpec};
pub use train::{fit, FitOutput, LossKind, LrSchedule, Objective, Precision, TrainConfig};

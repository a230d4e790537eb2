//! Dense networks with batch normalization, MSE / cross-entropy losses, an
//! input-Jacobian penalty, and a deterministic mini-batch trainer.

mod gradcheck;
mod net;
mod objective;
mod persist;
mod train;

pub use gradcheck::grad_check;
pub use net::{Activation, BatchNorm, DenseNet, Layer, MlpSpec, Mode};
pub use objective::{cross_entropy, jacobian_norm, mse, objective_value, LossKind, Objective, ObjectiveValue, Targets};
pub use persist::{load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use train::{train_classifier, train_regressor, EpochLoss, LossReport, Optimizer, TrainConfig};

//! Model zoo, reverse-mode autodiff, training and evaluation.

pub mod batch;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use batch::Batch;
pub use loss::{ce_loss, distill_loss, LossSpec};
pub use metrics::auc;
pub use model::{
    build_model, forward, init_params, predict, predict_batch, ArchConfig, Architecture,
    EncoderKind, InputShape, ModelArtifact, ModelSpec, Provenance, SearchedArch,
};
pub use optim::OptimizerKind;
pub use params::ParamStore;
pub use train::{
    evaluate_loss, loss_and_grads, train_model, train_model_with, TrainConfig, TrainLog,
    TrainingSet,
};

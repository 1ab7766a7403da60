//! Desk-scale feature distillation: networks, losses, optimizer, data and
//! experiment runner.

pub mod data;
pub mod experiment;
pub mod loss;
pub mod net;
pub mod optim;
pub mod train;

pub use data::{BlobSpec, DataSpec, Dataset, TraceLayer, TraceSpec};
pub use loss::{
    ce_loss, feature_loss, kl_vkd_loss, total_loss, KlDirection, LogitRouting, Projector,
    ProjectorDirection, Recipe, RecipeKind, TotalLoss,
};
pub use net::{backward, forward_capture, predict, Activation, Dense, GradientPlan, Network};
pub use optim::{adam_step, one_cycle_lr, AdamConfig, AdamState, OneCycle};
pub use train::{
    ari, train, train_classifier, RunRecord, TeacherFeatures, TrainOptions, UnstableAri,
};

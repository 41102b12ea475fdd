//! The graph-modulated transformer, its vanilla and graph-transformer
//! baselines, the counting loss, and single-model training.

mod config;
mod forward;
mod loss;
mod params;
mod train;

pub use config::{ModelConfig, Variant};
pub use forward::{patch_encode, ForwardOutput, ForwardTrace, FrozenSelections, GramformerModel};
pub use loss::{loss_by_name, total_loss, DensityLoss, MseCountLoss};
pub use params::build_params;
pub use train::{
    prepare_sample, scale_augment, scene_loss, scene_loss_with_grads, train_step, PreparedSample,
    TrainStepStats,
};

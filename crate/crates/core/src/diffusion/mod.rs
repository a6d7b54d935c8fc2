//! Minimal DDPM over flattened trajectories.

mod model;
mod sampler;
mod schedule;
mod train;
mod trajectory;

pub use model::{
    sinusoidal_embedding, Architecture, Dense, DenoiserModel, ForwardCache, ModelFile,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use sampler::{
    denoise_step, denoise_step_with, forward_noise, posterior_mean, prior_sample, reverse_step, sample,
    sample_batch, sample_with, Conditioning, SampleOptions,
};
pub use schedule::DiffusionSchedule;
pub use train::{epoch_loss, train, Optimizer, TrainConfig, TrainingLog};
pub use trajectory::Trajectory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {step} outside 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("invalid training setup: {0}")]
    InvalidTraining(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Generative classification with a class-conditional diffusion model.
//!
//! A small denoiser is trained to predict the noise added to an image given a
//! class condition. An image is classified by the class whose condition gives
//! the lowest (weighted) noise-prediction error, estimated by Monte Carlo with
//! paired-t-test pruning of unlikely classes. The gap between the two best
//! classes is the model's confidence, which drives anomaly detection and
//! psychometric calibration analysis; per-class mean error tensors give
//! counterfactual heatmaps.

pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod conditioning;
pub mod counterfactual;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use codec::{CodecKind, LatentCodec, PcaCodec};
pub use conditioning::{ConditioningLayout, ConditioningMatrix};
pub use denoiser::{ArchConfig, NoisePredictor, ResidualMlp};
pub use error::{Error, Result};
pub use exec::Execution;
pub use schedule::{NoiseSchedule, ScheduleKind};
pub use tensor::{LatentTensor, Space};

//! Model confidence scores, labeller confidence and psychometric fits.

pub mod confidence;
pub mod psychometric;

pub use crate::data::manifest::ConfidenceLevel as LabellerConfidence;
pub use confidence::{model_confidence, normalize_confidences, NormalizedConfidences};
pub use psychometric::{
    bin_performance, fit_psychometric, Bin, CredibleInterval, PriorSpec, PsychometricParams, PsychometricPosterior,
};

//! Dataset manifests, the procedural toy dataset, augmentation and splits.

pub mod augment;
pub mod image_io;
pub mod manifest;
pub mod split;
pub mod toy;

pub use augment::{augment, augment_image, AugmentationSpec, ColorJitter};
pub use image_io::{load_image, save_image};
pub use manifest::{Annotation, ConfidenceLevel, DatasetManifest, ManifestRecord, Split};
pub use split::{kfold_split, subsample_per_class, Fold};
pub use toy::{generate_toy_dataset, ToyDatasetSpec};

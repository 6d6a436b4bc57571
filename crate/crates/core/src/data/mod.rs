//! Manifest ingestion, filtering, leak-free splitting, augmentation,
//! preprocessing and episode sampling.

mod augment;
mod dataset;
mod episode;
mod manifest;
mod preprocess;
mod split;

pub use augment::{augment_records, augment_rotations, rotate, AugmentedRecord, Rotation};
pub use dataset::Dataset;
pub use episode::{sample_episode, Episode, EpisodeItem, EpisodeSampler, EpisodeSpec, SeedStream};
pub use manifest::{
    filter_convex, filter_luss, load_manifest, parse_manifest, write_manifest, LussFilter,
    LussReport, Manifest, Probe, SampleRecord, MANIFEST_HEADER,
};
pub use preprocess::{preprocess, preprocess_file, resize_bilinear, PreprocessOptions};
pub use split::{split_by_video, SplitOutcome, SplitPair};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest line {line}: field `{field}`: {message}")]
    Row { line: u64, field: &'static str, message: String },
    #[error("manifest header is missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("manifest: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot decode image {path}: {message}")]
    Image { path: String, message: String },
    #[error("image must be square, got {height}x{width}")]
    NonSquare { height: usize, width: usize },
    #[error("class {class} has {have} samples but an episode needs {need}")]
    InsufficientSamples { class: usize, have: usize, need: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

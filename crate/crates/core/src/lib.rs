//! Human-in-the-loop model updating for grid-based visual inspection.
//!
//! The crate covers synthetic data generation, a small fully-convolutional
//! grid classifier, masked weakly-supervised losses, the mentoring workflow,
//! retraining recipes and evaluation.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod grid;
#[cfg(feature = "cli")]
pub mod http;
pub mod losses;
pub mod mentorflow;
pub mod model;
pub mod pipeline;
pub mod sample;
pub mod service;
pub mod syndata;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{AnnotationMask, Detection, GridBox, GridLabel, GridShape, ProbGrid};
pub use model::{ArchConfig, Classifier, ModelCheckpoint};
pub use sample::{Domain, Feedback, Image, ImageSample, PartialLabel, Verdict};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Short content hash of a serializable configuration.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    syndata::hex(&Sha256::digest(&bytes)[..8])
}

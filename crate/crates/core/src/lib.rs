//! Composed image retrieval with segmentation-guided focus mapping.
//!
//! A query is a reference image plus a modification text; the model maps
//! both into focused multi-channel features, gates them into a composed
//! feature, and ranks gallery images by cosine similarity to it.

pub mod backbones;
pub mod data;
pub mod error;
pub mod eval;
pub mod focus;
pub mod model;
pub mod objective;
pub mod preprocess;
pub mod report;
pub mod revision;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use data::{
    validate_config, AblationFlag, DatasetManifest, Dims, FeatureMatrix, HyperConfig, Profile,
    QueryTriplet, Role, Split,
};
pub use error::{Error, Result};

/// Crate version plus the git revision it was built from.
pub const BUILD_ID: &str = env!("FOCUSCIR_BUILD_ID");

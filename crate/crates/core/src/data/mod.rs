//! Domain types shared across the pipeline: configuration, feature
//! matrices, attribute records and dataset manifests.

pub mod attributes;
pub mod config;
pub mod feature;
pub mod manifest;

pub use attributes::{AttributeImage, Slot};
pub use config::{validate_config, AblationFlag, HyperConfig, Profile};
pub use feature::{check_role, Dims, FeatureMatrix, Role};
pub use manifest::{
    load_manifest, write_manifest, DatasetManifest, ImageSource, ManifestFormat, QueryTriplet,
    ReportStyle, Split,
};

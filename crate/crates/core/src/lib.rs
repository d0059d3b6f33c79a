//! Geo-localization by matching a fused visual feature against a learned
//! hierarchy of geocell embeddings.

pub mod autodiff;
pub mod config;
pub mod datakit;
pub mod evalkit;
pub mod fusion;
pub mod geodesy;
pub mod geoembed;
pub mod inference;
mod init;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod trainer;

pub use autodiff::{ParamStore, Real, Tensor};
pub use config::RunConfig;
pub use fusion::{FusionConfig, RgbTokens, SegMap};
pub use geodesy::{haversine_km, CellId, GeoPoint};
pub use geoembed::GeoRepresentation;
pub use inference::{HierPrediction, InferenceConfig, Integration, Predictor};
pub use model::Model;
pub use partition::{build_hierarchy, build_partition, Partition, PartitionHierarchy, Sample};
pub use pipeline::PipelineError;
pub use trainer::{fit, Example, TrainConfig};

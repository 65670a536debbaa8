//! Cross-view ground-to-aerial image matching.
//!
//! Aerial images (and their segmentation masks) are warped into the ground
//! domain with a polar transform, encoded by independent convolutional
//! branches, and compared with ground panoramas by circular correlation along
//! the azimuth axis. The crate also carries the triplet-loss training loop and
//! the recall@K evaluation harness.

pub mod backbone;
pub mod correlate;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod metric;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod tensorfile;

pub use backbone::{concat_channels, Backbone, BackboneConfig, Provenance, WeightBundle};
pub use correlate::{match_pair, CorrelationProfile, MatchResult};
pub use dataset::{SplitSpec, TripletSample, TripletTensors};
pub use error::{Error, Result};
pub use eval::{recall_at_k, recall_report, RecallReport};
pub use imageops::{NormalizationStats, PolarConfig, PolarGrid};
pub use metric::{DistanceMatrix, TrainConfig};
pub use network::{Network, NetworkConfig};
pub use tensor::{FeatureMap, Image, Tensor3};

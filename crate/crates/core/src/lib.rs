//! Unsupervised anomaly detection in layered raster volumes.
//!
//! Healthy appearance is learned by two scale-specific convolutional
//! autoencoders fused by a denoising autoencoder; a linear one-class SVM
//! bounds the healthy feature distribution, and anomalous superpixels are
//! sub-categorized with spherical k-means selected by the Davies-Bouldin index.

pub mod baseline;
pub mod bundle;
pub mod cluster;
pub mod config;
pub mod dataset;
pub mod dcae;
pub mod error;
pub mod features;
pub mod metrics;
pub mod numcore;
pub mod ocsvm;

pub use error::{Error, Result};
pub use numcore::{Rng, Scalar, Tensor};
pub use volume::{AnomalyKind, GroundTruth, Volume};

pub type Tensor32 = numcore::Tensor<f32>;
pub type Tensor64 = numcore::Tensor<f64>;
pub type Network32 = numcore::Network<f32>;
pub type Network64 = numcore::Network<f64>;
pub mod patches;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod volume;

//! Open-vocabulary panoptic segmentation on a frozen convolutional backbone.

pub mod backbone;
pub mod classifiers;
pub mod cli;
pub mod color;
pub mod config;
pub mod data;
pub mod error;
pub mod inference;
pub mod kmeans;
pub mod mask_generator;
pub mod matching;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod training;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};

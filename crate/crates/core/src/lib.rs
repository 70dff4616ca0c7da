//! Unsupervised part segmentation through a hierarchical generator: noise
//! becomes part points, points become soft masks, masks become images, and
//! the synthesized mask-image pairs train a segmenter.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod fields;
pub mod image;
pub mod imageio;
pub mod latent;
pub mod masks;
pub mod nn_util;
pub mod optim;
pub mod trainer;
pub mod verify;

pub use config::{DatasetPreset, SegConfig, TrainConfig};
pub use error::{Error, Result};

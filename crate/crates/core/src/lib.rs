//! Single-pipeline multi-reconstruction of volumetric images as a data
//! augmentation strategy for tissue segmentation, with the surrounding
//! experiment machinery: phantom synthesis, acquisition simulation,
//! regularized super-resolution, rigid weak-label propagation, patch-based
//! training and ensemble inference, and DSC/ASSD/Wilcoxon evaluation.

pub mod augment;
pub mod error;
pub mod experiment;
pub mod forward;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod registration;
pub mod rng;
pub mod segmenter;
pub mod solver;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};

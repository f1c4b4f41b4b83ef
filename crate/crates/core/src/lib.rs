//! Layer-wise relevance propagation for small convolutional classifiers,
//! with localization metrics, occlusion analysis and heatmap rendering.

pub mod attrfile;
pub mod cli;
pub mod data;
pub mod eval;
pub mod lrp;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod occlusion;
pub(crate) mod ops;
pub mod render;
pub mod synth;

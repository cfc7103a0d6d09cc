//! Explanation-guided refinement of image classifiers against spatial
//! confounders: decoy dataset generation, Grad-CAM, the distance-aware XBL-D
//! loss with RRR / RRR-G baselines, activation precision/recall metrics and an
//! experiment pipeline.

pub mod datasets;
pub mod decoygen;
pub mod error;
pub mod evalmetrics;
pub mod exec;
pub mod experiment;
pub mod explainer;
pub mod imageio;
pub mod modelzoo;
pub mod nn;
pub mod optim;
pub mod reference;
pub mod refine;
pub mod report;
pub mod tensor;
pub mod training;
pub mod xblloss;

pub use error::{Error, Result};

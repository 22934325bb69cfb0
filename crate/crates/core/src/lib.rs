//! Matching of side-scan sonar image pairs that differ by nonlinear
//! intensity changes.
//!
//! The pipeline detects DoG and FAST keypoints in two coarsely aligned
//! images, cross-maps and fuses them into index-aligned correspondences,
//! cuts patches around every correspondence to build a self-labelled
//! training set, trains a shared-weight Siamese CNN to score patch
//! similarity, and finally accepts correspondences whose score clears a
//! threshold before RANSAC removes the remaining false matches.
//!
//! Modules follow the pipeline order: [`imagecore`], [`synth`],
//! [`detect`], [`patches`], [`net`], [`train`], [`matching`], with
//! [`experiment`] wiring them into a reproducible end-to-end run.

pub mod detect;
pub mod error;
pub mod experiment;
pub mod imagecore;
pub mod matching;
pub mod net;
pub mod patches;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

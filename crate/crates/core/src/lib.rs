//! Convolutional extreme learning machines for vision-based navigation
//! around procedurally generated small bodies.
//!
//! The crate covers the full experiment loop:
//!
//! - [`imagery`] renders synthetic grayscale images of a small body with
//!   exact geometric ground truth (camera model, pose, illumination).
//! - [`preprocess`] turns raw sensor frames into fixed-size network inputs
//!   (binarize, blob analysis, crop, random pad, optional noise, resize)
//!   while transforming the labels consistently.
//! - [`neural`] holds the shared encoder (same-padded 3x3 convolutions,
//!   activations, 2x2 pooling) and the random kernel initializers.
//! - [`elm`] trains the dense head in closed form by regularized least
//!   squares; [`gd`] trains full networks by mini-batch Adam and builds
//!   hybrid models that reuse gradient-trained encoders.
//! - [`archgen`] enumerates the procedural architecture grid and does exact
//!   parameter accounting; [`search`] orchestrates grid searches, CNN
//!   bootstrap training, and hybrid construction with resumable manifests.
//! - [`navmetrics`] reconstructs position estimates from model outputs and
//!   computes the navigation error metrics and report tables.

pub mod archgen;
pub mod data;
pub mod elm;
pub mod error;
pub mod gd;
pub mod gray;
pub mod imagery;
pub mod labels;
pub mod linalg;
pub mod navmetrics;
pub mod neural;
pub mod preprocess;
pub mod search;

pub use error::{Error, Result};

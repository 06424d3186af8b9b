//! Robotic grasp detection from RGB-D images with multimodal deep features.
//!
//! The crate covers the whole pipeline:
//!
//! - [`rgbd`]: seven-channel RGB-D rasters (depth, YUV, surface normals),
//!   the Cornell dataset loader and a deterministic synthetic scene generator.
//! - [`rect`] and [`patch`]: oriented grasp rectangles and the mapping from a
//!   rectangle to a network input vector with its validity mask and per-mode
//!   scaling.
//! - [`net`]: the two-hidden-layer sigmoid network with a logistic output.
//! - [`regularization`]: sparsity and weight penalties, including the
//!   modality-grouped family that drives features to use few input modes.
//! - [`optim`] and [`training`]: layerwise sparse-autoencoder pretraining and
//!   supervised fine-tuning.
//! - [`detection`]: exhaustive and two-stage cascaded rectangle search and
//!   score heatmaps.
//! - [`evaluation`]: recognition accuracy, point and rectangle metrics and
//!   cross-validation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detection;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod patch;
pub mod rect;
pub mod regularization;
pub mod rgbd;
pub mod training;

pub use error::{Error, Result};
pub use net::{CascadeParams, NetworkParams};
pub use patch::{ModalityMask, PatchInput};
pub use rect::GraspRect;
pub use rgbd::{AnnotatedScene, RgbdImage};

//! Camera-model noise fingerprints.
//!
//! A small fully-convolutional network is trained with a pairwise
//! distance-based logistic loss plus a spectral-flatness regularizer so that
//! its residual output ("noiseprint") captures the periodic artifacts of the
//! camera model that produced an image. The crate also provides the
//! synthetic camera simulator used for training data, blind splicing
//! localization on top of the residual, localization metrics and
//! nearest-reference source identification.

pub mod camera;
mod error;
pub mod localize;
pub mod metrics;
pub mod net;
pub mod raster;
pub mod rng;
pub mod source_id;
pub mod train;

pub use error::{Error, Result};
pub use raster::{PatchRef, Raster};

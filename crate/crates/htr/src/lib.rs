//! Handwritten text line recognition toolkit.
//!
//! Pipeline: line image -> preprocessing ([`image_prep`]) -> convolutional
//! feature extraction ([`encoder`]) -> transformer encoder-decoder
//! ([`transformer`]) -> character sequence ([`codec`]), trained with teacher
//! forcing ([`trainer`]) and scored by edit-distance metrics ([`metrics`]).
//!
//! Everything numerical sits on the reverse-mode tensor engine in [`tensor`],
//! which runs in `f32` for training/inference and in `f64` for
//! finite-difference gradient verification.

pub mod codec;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image_prep;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{HtrError, Result};

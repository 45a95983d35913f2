//! CPU-only random forest toolkit for medical-style image segmentation.
//!
//! Two architectures are provided:
//!
//! - **RF-FE** (feature extraction): a forest classifies each pixel from a
//!   172-value feature vector (intensity, 13x13 window means of the image
//!   and its Sobel magnitude, and the raw 13x13 patch).
//! - **RF-WI** (whole image): a multi-output forest takes a flattened Sobel
//!   image as one sample and predicts every mask pixel at once.
//!
//! Supporting modules cover image I/O and geometry ([`imagecore`]),
//! deterministic x10 augmentation ([`augment`]), feature assembly
//! ([`features`]), forest training and serialization ([`forest`]),
//! end-to-end pipelines ([`pipeline`]), metrics and report emission
//! ([`evaluate`]), and a synthetic dataset generator ([`synth`]).
//!
//! Everything is seedable and deterministic: the same inputs and seed give
//! bit-identical models and masks regardless of thread count.

pub mod augment;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod forest;
pub mod imagecore;
pub mod pipeline;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

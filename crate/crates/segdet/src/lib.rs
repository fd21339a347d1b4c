//! Joint object detection and segmentation for desk-scale imagery.
//!
//! The crate trains a single model that simultaneously segments a bright
//! disc and detects two classes of objects (the disc and a small dark
//! spot) in synthetic scenes, using only full-precision CPU math:
//!
//! 1. [`tensor`] — dense f64 tensors and a Wengert-tape reverse-mode
//!    autodiff core (convolutions, batch norm, elementwise ops, shape
//!    surgery).
//! 2. [`segnet`] — an encoder–decoder segmentation network whose decoder
//!    also exposes a multi-scale feature tap.
//! 3. [`dethead`] — a single-scale, anchor-based detection head reading
//!    that feature tap: raw-prediction decode/encode, target assignment,
//!    and the four-term detection loss.
//! 4. [`data`] — synthetic scene generation, preprocessing (threshold
//!    crop + resize), augmentation, manifests, and PGM/PPM I/O.
//! 5. [`trainer`] — interleaved detection/segmentation training with a
//!    shared Adam optimizer, loss ledger, CSV logging, and checkpoints.
//! 6. [`metrics`] — segmentation overlap and detection distance metrics
//!    plus the evaluation report.
//!
//! Everything is deterministic given a seed: data generation, parameter
//! initialization, batch order, and augmentation all derive from
//! explicitly passed RNG streams.

pub mod checkpoint;
pub mod data;
pub mod dethead;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod segnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

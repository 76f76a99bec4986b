//! Rescaled one-stage and cascaded two-stage detector families built on a
//! modified ResNet-FPN backbone, together with the training recipe, scaling
//! tables, detection postprocessing, and a latency benchmark harness.
//!
//! The crate is organized around the data path of a detector:
//!
//! - [`tensor`]: NCHW kernels, reverse-mode tape, parameter store
//! - [`geometry`]: boxes, IoU, anchors, target matching, box coding
//! - [`backbone`], [`pyramid`], [`heads`]: the model itself
//! - [`losses`]: training objectives with analytic gradients
//! - [`datapipe`]: dataset loading, augmentation, preprocessing
//! - [`schedule`]: learning-rate schedules, SGD, the training loop
//! - [`scaling`]: the model-scale tables and sweep grids
//! - [`postprocess`]: NMS, detection assembly, AP, latency benchmarking
//!
//! Hot loops run on rayon when the `parallel` feature (default) is enabled
//! and fall back to sequential execution without it; results are identical.

pub mod error;
pub mod par;
pub mod rng;
pub mod tensor;

pub mod layers;

pub mod backbone;
pub mod datapipe;
pub mod detector;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod postprocess;
pub mod pyramid;
pub mod scaling;
pub mod schedule;

pub use error::{DetError, Result};

pub use ndarray;

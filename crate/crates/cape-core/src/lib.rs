//! Category-agnostic pose estimation with a graph transformer decoder.
//!
//! Given one or a few support images with annotated keypoints and a skeleton
//! graph, the model localizes the same keypoints in a query image. Everything
//! runs on a small f64 reverse-mode autodiff engine, so the whole pipeline is
//! differentiable, gradient-checked, and CPU-friendly.

pub mod annot;
pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod posenc;
pub mod proposal;
pub mod rng;
pub mod synth;

pub use error::{CoreError, Result};

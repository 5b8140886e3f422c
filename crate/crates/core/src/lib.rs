//! Compositional 4D reconstruction of multi-object scenes with 3D Gaussian
//! splats: rendering, per-object deformation, scene composition,
//! optimization, synthetic data generation and evaluation.

pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod sh;
pub mod synth;

pub use error::{Error, Result};

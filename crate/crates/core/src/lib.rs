//! Guided depth super-resolution with learned frequency decomposition and
//! recurrent structure attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: grids, bicubic resampling, normalization, patches.
//! * [`tensor`], [`kernels`], [`graph`], [`params`], [`layers`], [`optim`]:
//!   a small CPU autodiff engine the network is built on.
//! * [`dcn`], [`attention`], [`reconstruct`], [`model`]: the network.
//! * [`dataio`], [`evalkit`], [`checkpoint`], [`config`]: data, metrics and
//!   run plumbing.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod dcn;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod reconstruct;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use numerics::{Grid2D, ImagePlane, Mask, Units};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

/// Version tag written into checkpoints and artifact directories.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

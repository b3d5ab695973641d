//! Category-level shape priors built from a shared template SDF and a
//! latent-conditioned deformation field, with tooling to fit them to
//! partial depth observations.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`autodiff`]: small dense networks with exact spatial and parameter gradients
//! - [`fields`]: template, hypernetwork and deformation fields and their composition
//! - [`training`]: loss terms and the auto-decoder training loop
//! - [`synthdata`]: analytic shape families, sampling, depth rendering, occlusion
//! - [`canonicalize`]: depth lifting and pose initialisation
//! - [`inference`]: joint latent/pose optimisation and the full pipeline
//! - [`meshing`]: marching cubes and mesh sampling
//! - [`metrics`]: chamfer distance, F-score and pose error

pub mod autodiff;
pub mod canonicalize;
pub mod error;
pub mod fields;
pub mod inference;
pub mod kdtree;
pub mod meshing;
pub mod metrics;
pub mod rng;
pub mod synthdata;
pub mod training;

pub mod geometry;

pub use error::{Error, Result};

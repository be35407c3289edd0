//! Semantic segmentation of hyperspectral imagery.
//!
//! The pipeline runs spatial-spectral feature extraction ([`features`]), a
//! per-pixel MLP classifier ([`ssmlp`]) and undirected-graphical-model
//! post-processing ([`ugm`]), scored with [`metrics`] under a low-shot
//! protocol driven by [`pipeline`].

pub mod container;
pub mod datacube;
pub mod error;
pub mod features;
mod linalg;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod ssmlp;
pub mod ugm;

pub use error::{Error, Result, Stage, StageExt};

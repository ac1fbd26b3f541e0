//! Parametric ensemble reconstruction for 2D emission tomography.
//!
//! The pipeline synthesizes phantom sinograms, reconstructs them with an
//! MLEM baseline and with a chi-square weighted Monte-Carlo ensemble of
//! parametric models, and scores hotspot detectability from the overlap of
//! activity distributions.

pub mod detection;
pub mod ensemble;
pub mod error;
pub mod image_model;
pub mod inference;
pub mod io;
pub mod mlem;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod seed;
pub mod zernike;

pub use error::{Error, Result};

//! Multiscale tile classification for whole-slide image pyramids.
//!
//! The pipeline runs from synthetic slide generation ([`pyramid`]) through
//! co-centered 25x/100x/400x tile extraction ([`tiling`]), patient-level
//! splitting and augmentation ([`dataset`]), MONO/DI/TRI models with frozen
//! convolutional branches ([`nn`], [`model`]), early-stopped training and the
//! hyperparameter grid ([`training`]), per-class F1 evaluation
//! ([`evaluation`]), and slide-level class maps ([`roi`]).

pub mod class;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pyramid;
pub mod roi;
pub mod seed;
pub mod tiling;
pub mod training;

pub use class::{Magnification, ScaleSet, TissueClass, NUM_CLASSES};
pub use error::{Error, Result};

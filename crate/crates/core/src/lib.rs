//! Cross-cohort, cross-modality single-cell topic model.
//!
//! Cells from several domains (cohorts, batches) share an embedded topic
//! space. Each domain measures a subset of the modality catalog; a
//! product-of-experts posterior fuses whatever modalities a cell has, and
//! the decoder can impute the ones it lacks.

pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evalsuite;
pub mod objective;
pub mod params;
pub mod seeding;
pub mod synthgen;
pub mod trainer;

pub use dataio::{Dataset, DomainBlock, ModalityMatrix, Schema};
pub use error::{CheckpointError, Error, Result};
pub use params::{ModelHyper, ModelParams, PoeMode};

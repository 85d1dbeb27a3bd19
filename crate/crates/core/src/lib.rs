//! Shared response models for multi-subject functional data: DetSRM,
//! ProbSRM and the atlas-compressed FastSRM, with co-smoothing
//! evaluation, planted-model data and a time/memory harness.

pub mod atlas;
pub mod bench;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod fastsrm;
pub mod linalg;
mod parallel;
pub mod seeds;
pub mod srm;
pub mod synthetic;

pub use error::{Result, SrmError};
pub use linalg::Matrix;

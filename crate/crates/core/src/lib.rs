//! Evaluation, postprocessing and Bayesian optimization of 3D instance
//! segmentations, plus the instance extraction and semi-supervised labeling
//! used to build classifier training data.

pub mod boengine;
pub mod distance;
pub mod error;
pub mod instances;
pub mod metrics;
pub mod postproc;
pub mod segopt;
pub mod semisup;
pub mod synthgen;
pub mod volume;

pub use error::{Error, Result};

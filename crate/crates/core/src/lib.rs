//! Fine-grained grayscale image classification lab.
//!
//! The pipeline: a small residual CNN backbone emits a three-scale feature
//! pyramid; a multiscale attention generator condenses it into a stack of
//! nonnegative attention maps; attention pooling turns the deepest features
//! plus the attention stack into a feature matrix that a linear head
//! classifies. During training the attention maps additionally guide three
//! image augmentations (mixup, patching, dimming) whose predictions are tied
//! to the primary prediction by a soft-distance consistency term.
//!
//! Everything runs on CPU, is deterministic under a single root seed, and is
//! exercised end to end by the `finecls` command-line tool.

pub mod attention;
pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod imgops;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

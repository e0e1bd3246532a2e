//! Multimodal single-object tracking on synthetic sequences.
//!
//! The crate is organized bottom-up:
//!
//! * [`autodiff`]: dense tensors and a reverse-mode tape,
//! * [`fusion`]: shared patch embedding, attention enhancement and the
//!   meta-embedding merger, plus stochastic modality perturbation,
//! * [`dmoe`]: the dual mixture-of-experts feed-forward layer and its
//!   auxiliary losses,
//! * [`model`]: the tracker itself, its objective and inference post-processing,
//! * [`sim`]: the synthetic multimodal sequence generator,
//! * [`harness`]: configuration, training, evaluation, routing analysis and
//!   checkpoints.

pub mod autodiff;
pub mod dmoe;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod params;
pub mod sim;

pub use error::{Error, Result};

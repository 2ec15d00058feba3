//! Weakly-supervised temporal grounding of natural-language queries in videos.
//!
//! The model assigns every video frame a matching score against a query and is
//! trained without any temporal annotations: supervision comes from the
//! video-query pairing itself (which pairs belong together) plus a
//! coarse-to-fine self-contrastive objective that mines easy/hard frames and
//! segments from the model's own score distribution.
//!
//! The crate is organized around a small tape-based autodiff engine
//! ([`autodiff`]) that the encoder, scoring heads, and losses build on. All
//! math is `f64` and single-threaded so runs are bit-reproducible for a fixed
//! seed.
//!
//! Entry points, roughly in pipeline order:
//!
//! * [`data`]: synthetic dataset generation, manifest + feature blob I/O,
//!   padded batching.
//! * [`model`]: configuration and the parameter store.
//! * [`encoder`]: feature projection, shared convolutional/attention encoder,
//!   cross-modal interaction.
//! * [`scoring`]: frame score/weight heads, pair scores, the pairing loss.
//! * [`mining`]: score-bound scheduling, frame mask mining, segment
//!   extraction, and the two contrastive refinement losses.
//! * [`localize`]: score thresholding to a ranked list of time intervals.
//! * [`metrics`]: temporal IoU and recall-at-rank evaluation.
//! * [`train`]: Adam, the training loop, logging, checkpointing.
//! * [`config`] / [`cli`]: run configuration files and the command line.
//!
//! The `examples/` directory demonstrates each capability end to end;
//! `examples/train_eval.rs` is the smallest complete pipeline.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod localize;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod scoring;
pub mod train;

pub use error::{Error, Result};

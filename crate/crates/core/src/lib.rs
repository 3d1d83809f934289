//! Embedding-based multiple instance learning for tissue-microarray cores.
//!
//! Each core is a [`Bag`] of patch embeddings from a frozen encoder. An
//! aggregator pools the bag into one embedding (average, max, attention, or a
//! transformer with a class token), a linear head produces class scores, and
//! training minimizes a class-weighted cross-entropy with AdamW, one bag per
//! step. Everything runs on a small tape-based autodiff kernel in
//! [`numcore`] and is bit-reproducible for a fixed seed.
//!
//! Runnable walkthroughs live in `examples/`; the `bagforge` binary exposes
//! the same workflow on the command line.

pub mod aggregators;
pub mod bag;
pub mod cli;
pub mod datastore;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod optim;
pub mod rng;
pub mod tsne;

pub use bag::Bag;
pub use error::{Error, Result};

//! Probabilistic rank-and-reward (PRR) slate recommendation.
//!
//! The crate contains the categorical slate model and its ablations, the
//! factored-softmax policies with IPS-family estimators, mini-batch Adam
//! training for both, MIPS-backed slate construction, and the synthetic and
//! session-completion simulators used to compare them by simulated A/B tests.

pub mod decision;
pub mod environment;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod numeric;
pub mod policy;
pub mod session;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{Catalog, Context, Feedback, LogRecord, ModelDims, ModelParams, Slate, Variant};

//! Progress estimation for chain-of-thought reasoning traces.
//!
//! The crate covers the whole pipeline: reading traces, inserting and masking
//! inline `<progressbar>N</progressbar>` markers, labelling prefixes with
//! progress buckets, training linear probes on hidden states, length-based
//! baselines, progress and dispersion metrics, a streaming marker parser,
//! and seeded synthetic data for testing.

pub mod annotate;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod label;
pub mod marker;
pub mod metrics;
pub mod probe;
pub mod stream;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
pub use trace::{GroupKey, ProgressAnnotation, ReasoningTrace};

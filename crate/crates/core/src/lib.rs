//! Speaker-identity analysis over precomputed speech embeddings.
//!
//! The crate covers probe-based speaker recognition, representation
//! similarity (linear CKA), pairwise distances and stimuli selection,
//! behavioural signal-detection analysis, pair discrimination decoders and
//! voxel-wise encoding/decoding models. The `voiceprobe` binary exposes each
//! pipeline as a subcommand.

pub mod behavior;
pub mod cli;
pub mod corpus;
pub mod discrim;
pub mod encoding;
pub mod distances;
pub mod error;
pub mod nn;
pub mod probe;
pub mod similarity;
pub mod stimsel;
pub mod npy;
pub mod stats;

pub use error::{Error, Result};

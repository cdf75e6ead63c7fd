//! Speaker-change aware linear-chain CRF for dialogue act tagging.
//!
//! The crate is organised bottom-up:
//!
//! * [`corpus`] loads and normalises conversations, reconnects interrupted
//!   utterances, derives speaker-change sequences, and generates synthetic
//!   corpora with known transition structure.
//! * [`encoder`] turns token lists into utterance and contextual embeddings,
//!   with analytic gradients.
//! * [`crf`] holds exact inference over a score lattice: path scores, the
//!   log-partition function, marginals, NLL gradients, Viterbi decoding and
//!   score-averaging ensembles. Transition scores may be conditioned on
//!   whether the speaker changed between two utterances.
//! * [`model`] ties an encoder and a CRF layer into one trainable network
//!   and owns the checkpoint format.
//! * [`train`] implements Adam, dropout, early stopping and multi-seed runs.
//! * [`eval`] computes accuracy, confusion matrices, per-label metrics and
//!   transition heatmaps.
//! * [`cli`] is the command-line front end.

pub mod cli;
pub mod corpus;
pub mod crf;
pub mod encoder;
mod error;
pub mod eval;
pub mod model;
pub mod train;

pub use error::{Error, Result};

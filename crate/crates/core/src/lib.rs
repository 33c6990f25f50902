//! Online balanced clustering of paired feature streams, adversarial
//! mutual-information mapping between the resulting cluster banks, and
//! retrieval-based modality transfer, exercised on synthetic paired corpora
//! with known ground-truth correspondences.
//!
//! Module map:
//!
//! - [`corpus`]: synthetic paired "visual"/"audio" sequences with a long-tail
//!   phoneme inventory and homophene structure.
//! - [`clustering`]: streaming balanced k-means banks and the random-pruning
//!   baseline.
//! - [`nn`]: dense networks with analytic gradients and Adam.
//! - [`mi`]: exact discrete MI plus Donsker-Varadhan and Jensen-Shannon neural
//!   estimators.
//! - [`transfer`]: cosine softmax addressing over centers and restoration.
//! - [`trainer`]: the alternating discriminator / generator training loop.
//! - [`eval`]: phoneme match accuracy, confusion matrices, coverage, Hungarian
//!   assignment, CSV exports.
//! - [`cli`]: command implementations behind the `univpm` binary.

pub mod cli;
pub mod clustering;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod mi;
pub mod nn;
pub mod trainer;
pub mod transfer;

mod blob;
mod rng;

pub use error::{Error, Result};

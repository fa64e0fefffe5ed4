//! Melody-conditioned chord VAE with corruption-based domain adversarial
//! training.
//!
//! The crate is organized around the data path:
//!
//! - [`encodings`]: chord and melody grids, transposition and corruption.
//! - [`corpus`]: lead-sheet ingest, snippet slicing, splits and the binary corpus file.
//! - [`model`]: encoder, decoder and discriminator over grouped parameters.
//! - [`objectives`]: VAE, discriminator and confusion losses.
//! - [`training`]: schedules, optimizers and the alternating training loop.
//! - [`evaluation`]: transposition similarity and chord-swap controllability.
//! - [`cli`]: the `harmonia` command line.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod cli;
pub mod corpus;
pub mod encodings;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};

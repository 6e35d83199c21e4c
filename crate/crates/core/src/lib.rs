//! Hierarchical multitask CTC recognition.
//!
//! A stacked bidirectional LSTM encoder is trained with a subword-level CTC
//! loss at its top layer and, optionally, a phone-level CTC loss attached to an
//! intermediate layer. The crate covers the numeric substrate, the CTC lattice,
//! the encoder, loss combination and training regimes, BPE wordpieces, data
//! preparation with a synthetic task generator, and the training loop.

pub mod cli;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod multitask;
pub mod numeric;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};

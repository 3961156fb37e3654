//! Grapheme-to-phoneme modeling in pure Rust.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that does not
//! touch the filesystem: a small reverse-mode autodiff tape, Transformer
//! encoder/decoder layers, masked-grapheme pretraining, the G2P model
//! variants built on the pretrained encoder, Adam training, beam-search
//! decoding, and WER/PER evaluation. File formats and the command line live
//! in the companion `gbert-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod fmath;
mod hash;

pub mod checkpoint;
pub mod data;
pub mod diag;
pub mod eval;
pub mod gbert;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use rng::{SeedRng, Stream};
pub use tensor::{Array, ParamStore, Tape, TensorRef};

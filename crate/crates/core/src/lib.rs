//! Core of the BNTA re-identification framework.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! a dense tensor type with a define-by-run gradient tape, the layer
//! vocabulary of the backbone (convolution, batch and instance
//! normalization, pooling, fully-connected), the network with its three
//! heads, every training and adaptation loss, part nearest neighbor
//! pairing, the optimizers and the two optimization loops, a synthetic
//! person-image generator and the retrieval metrics.
//!
//! File formats, configuration parsing and the command-line front end
//! live in the `bnta` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adapt;
pub mod blob;
pub mod error;
pub mod layers;
mod linalg;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pairing;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use math::Float;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

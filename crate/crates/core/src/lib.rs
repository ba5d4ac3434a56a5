//! Self-supervised audio representation learning on log-mel spectrograms.
//!
//! Two pretext tasks share one small reverse-mode tensor engine:
//!
//! * [`contrastive`]: a VGG-style encoder and projection head trained with the
//!   NT-Xent loss on pairs of [`augment`]ed views;
//! * [`codebook`] + [`generative`]: spectrogram patches are compressed by an
//!   autoencoder, quantized with k-means, and a causal transformer predicts the
//!   next code.
//!
//! [`probe`] scores frozen representations with a linear classifier under a fold
//! protocol. The crate is `no_std` + `alloc`; file formats, WAV decoding and the
//! command line live in the `sonanza` crate.

#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

// Float methods such as `sqrt` resolve inherently only when std is linked
// somewhere in the build; without the `std` feature modules import
// `num_traits::Float` (libm) instead.

pub mod augment;
pub mod codebook;
pub mod contrastive;
pub mod dsp;
mod error;
pub mod generative;
pub mod nn;
pub mod probe;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};

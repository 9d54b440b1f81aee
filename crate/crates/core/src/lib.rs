//! Weakly supervised video anomaly detection with dual prototype memories.
//!
//! The crate works on precomputed per-snippet feature sequences. A
//! global/local self-attention block embeds each video, a normal and an
//! abnormal memory bank score every snippet against learned prototypes, and
//! a Gaussian latent path regularizes the normal representation before a
//! snippet classifier. Training is multiple-instance: only video-level
//! labels are used.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tape`]) in
//! 64-bit floats so every gradient can be checked by finite differences.

pub mod error;
pub mod attention;
pub mod checkpoint;
pub mod features;
pub mod gradcheck;
pub mod latent;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod topk;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;

/// Seedable generator used everywhere randomness enters (init, batches, dropout, noise).
pub type DetRng = rand_chacha::ChaCha8Rng;

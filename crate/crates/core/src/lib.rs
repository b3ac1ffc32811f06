//! Link-level simulator for generative semantic video transport over a
//! low-earth-orbit satellite relay.
//!
//! The crate is organised bottom-up:
//!
//! * [`channel`]: shadowed-Rician fading, amplify-and-forward relay SNR.
//! * [`modem`]: Gray-mapped QPSK and soft demapping.
//! * [`ldpc`]: sparse parity-check codes, sum-product decoding, BLER curves.
//! * [`si_transport`]: packing quantized semantic symbols into LDPC blocks and
//!   modelling per-block erasures.
//! * [`latent`]: calibrated scalar quantization of latent tensors, imputation
//!   on erasure, and quality metrics.
//! * [`planner`]: capacity-constrained choice of quantization level and
//!   SI vector length.
//! * [`generative`]: denoising sampler, in-context loss and low-rank adapters.
//! * [`harness`]: configuration, experiment orchestration and CSV output.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod channel;
pub mod generative;
pub mod harness;
pub mod latent;
pub mod ldpc;
pub mod modem;
pub mod planner;
pub mod quad;
pub mod rng;
pub mod si_transport;
pub mod stats;

pub use channel::{FadingParams, LinkBudget, SatelliteLink, SnrSample};
pub use latent::{LatentTensor, QuantizerParams};
pub use ldpc::{BlerCurve, ParityCheckMatrix};
pub use si_transport::{BlockLayout, ErasurePattern, SiCodeword, SiVector};

//! Invariant-representation learning for noise-robust sequence-to-sequence
//! recognition at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`signal`]: waveform mixing, reverberation, gain and resampling.
//! - [`synthcorpus`]: deterministic synthetic corpus and noise bank.
//! - [`features`]: MFCC extraction with frozen normalisation.
//! - [`autodiff`]: tape-based reverse-mode differentiation.
//! - [`seq2seq`]: attention encoder-decoder with representation taps.
//! - [`losses`]: cross-entropy, pairing penalties and the baseline objectives.
//! - [`training`]: Adam, the learning-rate schedule and the training loop.
//! - [`eval`]: beam search, CER, distance profiles and the out-of-domain suite.

pub mod autodiff;
pub mod eval;
pub mod features;
pub mod losses;
pub mod seed;
pub mod signal;
pub mod seq2seq;
pub mod synthcorpus;
pub mod training;

//! Generative data augmentation toolkit for Wi-Fi gesture recognition.
//!
//! The pipeline runs in three stages:
//!
//! 1. [`csi`]: channel state information recordings: synthesis, the `CSID`
//!    binary format and a CSV importer; [`manifest`] groups recordings into
//!    datasets and produces stratified splits.
//! 2. [`dsp`]: phase sanitization and Doppler-frequency-shift (DFS)
//!    spectrograms via the STFT; [`spectrogram`] holds the image type and the
//!    `DFSS` format.
//! 3. [`diffusion`] generates labeled spectrograms, [`augment`] mixes them (or
//!    classical transforms) into the real training set, and [`classifier`] +
//!    [`metrics`] measure what the augmentation buys.

pub mod augment;
pub mod classifier;
pub mod csi;
pub mod diffusion;
pub mod dsp;
mod error;
pub mod manifest;
pub mod metrics;
pub mod spectrogram;

pub use error::{Error, Result};

/// Default master seed for every stochastic component.
pub const DEFAULT_SEED: u64 = 42;

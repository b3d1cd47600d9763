//! Synthetic GPS L1 C/A correlator outputs with single-multipath injection,
//! plus two multipath detectors trained on them: a VGG-style convolutional
//! network (`MultipathCnn`) and an RBF support vector machine working on
//! correlation-shape features.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! the experiment campaigns live in the `mpdetect-harness` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod cnn;
pub mod correlator;
pub mod dataset;
pub mod error;
pub mod nn;
pub mod rng;
pub mod svm;

pub use error::{Error, Result};

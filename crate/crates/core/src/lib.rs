//! Numerical core for studying how Bayesian neural networks react to
//! adversarial and random perturbations.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs and an explicit [`Rng`]; file formats, the
//! experiment harness and the command line live in the `bnnadv` crate.
//!
//! Module map:
//!
//! * [`nn`]: dense tensors, the fixed layer set, reverse-mode gradients and optimisers.
//! * [`data`]: datasets, perturbation and noise generators, training-set distance.
//! * [`bnn`]: MC-Dropout, Bayes by Backprop, probabilistic backpropagation and a
//!   deterministic baseline behind one Monte Carlo predictive interface.
//! * [`uncertainty`]: predictive entropy, mutual information and variation ratio.
//! * [`attack`]: FGSM and its Monte Carlo adaptation to Bayesian networks.
//! * [`detect`]: threshold detectors and ROC analysis on uncertainty scores.
#![no_std]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod attack;
pub mod bnn;
pub mod data;
pub mod detect;
mod error;
pub mod linalg;
pub mod nn;
mod rng;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;

/// Number of classes for MNIST-style digit classification.
pub const NUM_CLASSES: usize = 10;
/// Pixels in one flattened 28×28 image.
pub const IMAGE_PIXELS: usize = 784;

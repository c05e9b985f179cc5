//! Numerical core for model-alignment experiments on adversarial
//! transferability.
//!
//! The crate is `no_std` (with `alloc`). It provides a small dense tensor
//! engine with reverse-mode gradients for layer-stack classifiers, seeded
//! model families and synthetic data, supervised training, the alignment
//! fine-tuning procedure, l-infinity transfer attacks, and the measurement
//! instruments used to study aligned models (DCT spectra, loss surfaces,
//! gradient norms, input-Hessian eigenvalues, similarity metrics).
//!
//! File formats, reports, the experiment harness and the command line live
//! in the companion `malign` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod math;
pub mod rng;
pub mod tensor;
pub mod loss;
pub mod layers;
pub mod model;
pub mod optim;
pub mod hvp;
pub mod zoo;
pub mod data;
pub mod train;
pub mod alignment;
pub mod attacks;
pub mod analysis;
pub mod eval;

pub use error::{Error, Result};
pub use layers::LayerSpec;
pub use model::{GradientBundle, LossSeed, Model, Trace};
pub use tensor::{NamedTensor, Tensor};

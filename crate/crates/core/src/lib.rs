//! Triple-domain low-dose PET enhancement, desk scale.
//!
//! Everything numeric lives here: a dense f32 tensor type with a tape-based
//! reverse-mode autodiff substrate, the 3D Haar wavelet-packet transform,
//! parallel-beam projection physics (Radon / FBP / Poisson dose simulation /
//! MLEM-OSEM), the three coupled networks (sinogram denoiser, wavelet
//! reconstructor, pair discriminator), the three domain losses with GradNorm
//! balancing, synthetic phantom data generation, the three-stage trainer, and
//! the evaluation metrics.
//!
//! The crate is `no_std`-compatible (`alloc` required). File formats, CLI and
//! anything touching the filesystem live in the companion `triplet-cli` crate.
//! Enable the `parallel` feature for multi-threaded kernels; results are
//! deterministic either way within a single build.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod datagen;
pub mod fmath;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod ops;
pub mod optim;
mod par;
pub mod projection;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod wavelet;

pub use tape::{Grads, Tape, Var};
pub use tensor::{ShapeError, Tensor};

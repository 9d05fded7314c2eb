//! Denoising diffusion for functions rather than pixel arrays.
//!
//! This crate trains and samples generative diffusion models whose state is a
//! *field* — a function on the unit square observed at an arbitrary set of
//! coordinates — instead of a fixed-resolution tensor. White noise has no
//! well-behaved limit as the sampling grid is refined, so the forward process
//! perturbs data with *mollified* noise: white noise pushed through a Gaussian
//! smoothing operator `T`. All forward, posterior and reverse-step formulas
//! act in that mollified space, which makes the model resolution-free: train
//! on random subsamples of 32x32 images, then sample, super-resolve or inpaint
//! on any grid.
//!
//! The building blocks are deliberately self-contained: a seeded FFT-based
//! mollifier, closed-form diffusion algebra, a tape-based reverse-mode
//! autodiff core, a point-cloud denoiser built from sparse depthwise
//! convolutions, and evaluation tooling. Every closed-form path is checked
//! against a brute-force oracle in [`oracles`].

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod fft;
pub mod field;
pub mod grad;
pub mod io;
pub mod mollifier;
pub mod oracles;
pub mod schedule;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};

// Every Rust block in the guide compiles and runs with the library's tests,
// so the book cannot drift from the code it documents.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/mollification.md")]
    mod mollification {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    mod diffusion {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/denoiser.md")]
    mod denoiser {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/tasks.md")]
    mod tasks {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

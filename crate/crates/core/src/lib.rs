//! Core numerics for the content-style identification lab.
//!
//! Everything in this crate is deterministic: given the same inputs and the
//! same seeds, every function produces bit-identical output on every platform.
//! That property is load-bearing (run artifacts are byte-compared), so the
//! crate avoids platform `f64` intrinsics for transcendentals and routes them
//! through [`fmath`] instead.
//!
//! The crate is `no_std` (with `alloc`); file formats, CLI, and anything that
//! touches a clock live in the companion `csid-lab` crate.
//!
//! Module map:
//! - [`mat`], [`mlp`], [`adam`], [`gradcheck`]: dense matrices, fixed-graph
//!   MLPs with a reverse-mode tape, Adam, and the finite-difference oracle.
//! - [`rng`]: seeded streams and scalar samplers.
//! - [`world`]: synthetic ground-truth worlds with invertible mixing.
//! - [`kernel`]: Gaussian-kernel MMD and HSIC with permutation calibration.
//! - [`models`]: generator/encoder/discriminator bundles for both routes.
//! - [`gan`], [`ldm`]: the two trainers.
//! - [`invert`]: latent recovery by optimization, and translation on top.
//! - [`eval`]: alignment, leakage, and identifiability reports.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod adam;
pub mod eval;
pub mod fmath;
pub mod gan;
pub mod gradcheck;
pub mod invert;
pub mod kernel;
pub mod ldm;
pub mod mat;
pub mod mlp;
pub mod models;
pub mod rng;
pub mod world;

mod error;

pub use error::{Error, Result};

/// Crate version, recorded in run artifacts by the companion crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

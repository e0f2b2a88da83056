//! Cross-adversarial local distribution regularization for semi-supervised
//! segmentation.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`autodiff`]) drives a tiny encoder–decoder ([`segnet`]), Stein
//! variational particle samplers ([`sampler`]), the mixed-particle
//! regularizer ([`cross_ald`]) and a semi-supervised training loop
//! ([`trainer`]) on a synthetic corpus ([`data`]). [`cli`] wraps the
//! workflows behind the `xald` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod cross_ald;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod sampler;
pub mod segnet;
pub mod trainer;

pub use error::{Error, Result};

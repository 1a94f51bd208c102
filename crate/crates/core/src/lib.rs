//! Stochastic-expert transformers and Mixture-of-Experts baselines on synthetic
//! sequence-transduction tasks, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod inference;
pub mod routing;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};

//! Graph-modulated transformer for crowd density estimation.
//!
//! The crate is organized around a small reverse-mode tensor kernel
//! ([`numerics`]), the two graph constructions that modulate the
//! transformer ([`graphs`]), the model itself with its baselines
//! ([`model`]), a synthetic scene generator ([`synthdata`]), attention and
//! counting diagnostics ([`diagnostics`]), and a CLI ([`cli`]).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod graphs;
pub mod model;
pub mod numerics;
pub mod seeding;
pub mod synthdata;

pub use error::{Error, Result};

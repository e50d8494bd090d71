//! Block-based compressed sensing of grayscale images with a learned sparse
//! ternary projection and a fully connected reconstruction network, plus an
//! l1 recovery baseline.
//!
//! The projection matrix has exactly `K` nonzero entries in `{-1, +1}` per
//! column, so sensing needs only additions and subtractions. Training keeps a
//! continuous weight matrix and re-derives the ternary matrix and per-column
//! scales from it at every step.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod imaging;
pub mod model;
pub mod network;
pub mod numerics;
pub mod persistence;
pub mod projection;
pub mod training;

pub use error::{Error, Result};

//! Rolling rectified-flow matching for joint audio-video generation.
//!
//! A small two-branch transformer predicts per-frame velocity fields for a
//! latent video and a mel-like audio track. Sampling runs a sliding window
//! whose frames sit at staggered noise levels, emitting one clean
//! audio-video frame per sweep for as long as the caller wants.

pub mod analysis;
pub mod check;
pub mod config;
pub mod error;
pub mod flowmatch;
pub mod model;
pub mod numerics;
pub mod rolling;
pub mod schedule;
pub mod toydata;
pub mod training;

pub use error::{Error, Result};

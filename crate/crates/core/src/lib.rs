//! Adaptive proposal generation for temporal sentence grounding.
//!
//! The pipeline encodes a video and a query, classifies foreground frames,
//! regresses a segment from every foreground frame, refines the resulting
//! proposals with an edge-convolution graph and finally scores and adjusts
//! them. Everything runs on a small reverse-mode autodiff engine
//! ([`autodiff`]) so that training and finite-difference verification share
//! one code path.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod consolidation;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod proposal;
pub mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

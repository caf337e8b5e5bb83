//! Desk-scale multimodal training lab.
//!
//! Joint training of a two-encoder discriminative model tends to be driven
//! by whichever modality scores better, leaving the other encoder
//! under-optimized. This crate implements the complete loop for studying
//! and correcting that: contribution monitoring per modality, adaptive
//! gradient modulation of the dominant side, and covariance-matched
//! Gaussian noise injection that restores the update noise the modulation
//! removed. Everything is deterministic under a fixed seed.

pub mod data;
pub mod error;
pub mod model;
pub mod modulation;
pub mod noise;
pub mod numkit;

pub use error::{Error, Result};

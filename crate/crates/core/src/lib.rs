//! DyDiff-VAE: dynamic latent user interests for information diffusion prediction.
//!
//! A graph-convolutional GRU encoder tracks per-user latent interests over
//! discrete time steps; an attention decoder ranks likely next participants
//! of a cascade given its content and the users who already took part.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod synthgen;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

//! Single-image fusion with two conditional latent-diffusion streams whose per-step noise
//! estimates are blended by a learned, segmentation-modulated weight map.

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod schedule;
pub mod seghead;
pub mod stream;
pub mod synth;
pub mod training;
pub mod variants;

pub use error::{Error, Result};

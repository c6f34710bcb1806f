//! Text-driven video prediction: predict the frames that follow a first
//! frame by inferring per-step motion embeddings from a caption and rolling
//! them out as latent residuals in a frozen generator's layer-wise latent
//! space.
//!
//! The crate is organised around a small tape-based autodiff engine
//! ([`autodiff`]); everything differentiable — the text encoder, the motion
//! inference module, the recurrent latent rollout, the generator, and both
//! discriminators — is built from its ops so that training, gradient checks,
//! and inference share one numeric path.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod disc;
pub mod error;
pub mod export;
pub mod generator;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod objectives;
pub mod pretrain;
pub mod rng;
pub mod textenc;
pub mod tim;
pub mod trainer;

pub use error::{Error, Result};

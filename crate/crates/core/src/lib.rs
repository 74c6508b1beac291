//! Decoupled subject/motion customization for a toy latent video diffusion model.
//!
//! The crate trains two kinds of lightweight adapters on a frozen video
//! diffusion backbone: an identity adapter inserted at spatial cross-attention
//! layers (subject appearance) and a motion adapter inserted at temporal
//! transformer layers (motion patterns, with appearance guidance from a frozen
//! image encoder). Both are trained independently and composed at inference.
//!
//! Everything runs on the CPU in `f64` with a small reverse-mode autodiff
//! engine, so training results and sampled videos are bit-for-bit
//! reproducible given a seed.

pub mod adapters;
pub mod analysis;
pub mod compose;
pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod latent;
pub mod model;
pub mod motion;
pub mod nn;
pub mod trainer;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod storage;
pub mod subject;
pub mod synthetic;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};

//! Face anonymization by diffusion inversion: invert an image latent into per-step
//! noise maps, then re-denoise under negated identity guidance with optional region
//! masks. Includes toy plugins and an evaluation harness.

pub mod backbones;
pub mod conditioning;
pub mod container;
pub mod denoiser;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod inversion;
pub mod kv;
pub mod masks;
pub mod noise;
pub mod pipeline;
pub mod runs;
pub mod schedule;
pub mod tensor;
pub mod toyset;

pub use error::{Error, ErrorClass, Result};

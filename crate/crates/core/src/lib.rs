//! Text-conditioned, 3D-consistent image generation on procedural primitive
//! scenes: a coarse radiance-field prior conditions a two-stream asynchronous
//! denoising diffusion model, with noise-blended local editing, noise-to-text
//! inversion, and one-shot novel-view fine-tuning.
//!
//! Everything runs on the CPU in plain Rust. The differentiable substrate is
//! a small tape-based reverse-mode engine in [`numerics`]; data-parallel inner
//! loops (ray batches, per-view renders, batched convolutions) go through
//! [`par`], which uses rayon when the default `parallel` feature is enabled
//! and falls back to sequential iteration otherwise. Results are bit-identical
//! either way: work is split by fixed partitioning, never by reduction order.

pub mod config;
pub mod denoiser;
pub mod editing;
pub mod error;
pub mod eval;
pub mod field;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod provenance;
pub mod scenegen;
pub mod schedule;

pub use error::{Error, Result};

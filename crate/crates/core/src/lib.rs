//! Identity-preserving video diffusion at desk scale.
//!
//! This crate implements the full machinery end to end on a synthetic
//! moving-glyph task small enough to train and sample in seconds:
//!
//! * a tiny tensor library with reverse-mode autodiff ([`numerics`]),
//! * a denoiser with identity-injection attention blocks, a face-embedding
//!   refiner, and distribution-aligned feature fusion ([`models`]),
//! * deterministic EDM-style stochastic sampling with optional
//!   face-similarity guidance solved per step by a small inner optimizer
//!   ([`sampler`]),
//! * masked-loss training and pretraining for the frozen image/identity
//!   codecs ([`training`]),
//! * a verification suite that checks the stochastic-control math the
//!   guidance relies on against closed-form Gaussian oracles
//!   ([`verification`]),
//! * dataset synthesis, binary clip/checkpoint formats, metrics, and a CLI
//!   ([`data`], [`metrics`], [`config`], [`cli`]).
//!
//! Everything is pure Rust with no numeric dependencies; all randomness is
//! counter-based and reproducible from explicit seeds.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod verification;

pub use error::{Result, SanmError};

//! Pixel-wise defect-depth estimation from simulated active thermography.
//!
//! The pipeline stages are:
//!
//! 1. **heatsim** – 1-D transient heat conduction with a flat-bottom-hole
//!    defect model and a virtual IR camera; produces labeled per-pixel
//!    grayscale response curves.
//! 2. **reconstruct** – subsampling, smoothing, stripe-image reconstruction
//!    and log enhancement; turns one curve into a model-ready image.
//! 3. **model** – a small SE-attention convolutional encoder plus a residual
//!    regression head with a learnable output affine; predicts depth.
//! 4. **training** – hybrid MSE/MAE loss, AdamW, gradient clipping, plateau
//!    LR scheduling, deterministic stratified splits.
//! 5. **eval** – regression metrics, per-depth breakdown tables and the
//!    two-factor ablation grid.
//!
//! Everything is deterministic under a seed: identical configs and seeds
//! reproduce identical artifacts byte for byte.

pub mod config;
pub mod eval;
pub mod heatsim;
pub mod manifest;
pub mod model;
pub mod pgm;
pub mod reconstruct;
pub mod training;
pub(crate) mod util;

pub use util::{derive_stream_seed, round_half_away_from_zero};

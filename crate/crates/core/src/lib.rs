//! Self-supervised pretraining for pathology-style image tiles, at desk scale.
//!
//! The crate is `no_std`-compatible (with `alloc`); everything that touches
//! the filesystem, the CLI, or a byte-level file format lives in the
//! companion `pathssl-tools` crate. What is here is the numeric substance:
//!
//! * [`tensor`] / [`rng`] / [`raster`] — dense float kernels, a counter-based
//!   deterministic PRNG, and bilinear image resampling.
//! * [`slide`] / [`hsv`] / [`tiles`] / [`sampler`] — synthetic slide
//!   generation, HSV tissue filtering, tile grids, and the
//!   diagnosis/magnification-balanced tile sampler.
//! * [`augment`] — extended-context translation and the crop-and-resize
//!   baseline, multi-crop view assembly, photometric ops, view overlap.
//! * [`vit`] — a small vision transformer (class token, registers, DPN, QKN,
//!   SwiGLU) with hand-written backward passes.
//! * [`objective`] — projection heads, Sinkhorn-centered distillation losses,
//!   masked-token loss, and vMF-kernel / nearest-neighbor entropy
//!   regularizers with analytic gradients.
//! * [`optim`] — AdamW and RMS-clipped AdamW, cosine schedules, gradient
//!   clipping, EMA updates.
//! * [`train`] — the student–teacher loop, collapse monitoring, and the
//!   frozen-teacher distillation mode.
//! * [`probe`] — frozen-embedding linear probes and the evaluation metrics
//!   (weighted F1, McNemar, Pearson).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod error;
pub mod hsv;
pub mod objective;
pub mod optim;
pub mod probe;
pub mod raster;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod slide;
pub mod stats;
pub mod tensor;
pub mod tiles;
pub mod train;
pub mod vit;

pub use error::{CoreError, Result};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;

//! One-shot semantic part segmentation from the attention maps of a frozen
//! text-conditioned latent diffusion model.
//!
//! Per-class text embeddings are optimized so that cross-attention and
//! weighted accumulated self-attention (WAS) maps reproduce a single
//! annotated mask; unseen images are then segmented by an argmax over the
//! same maps.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imageops;
pub mod inference;
pub mod optimizer;
pub mod scheduler;

pub use error::{Error, Result};

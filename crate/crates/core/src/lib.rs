//! Sound-to-image generation with attention-fused text conditioning.
//!
//! An audio clip is captioned; the caption's words carry audio attention (from the
//! captioner) and sentence attention (noun probability from a tagger). Those, plus a
//! positional encoding, become per-token weights that modulate the caption's text
//! embedding before image generation. The weights are then refined by direct sound
//! optimization against audio-image and text-image similarity.
//!
//! Model roles are trait objects in [`backends`]; the deterministic mock suite makes
//! the whole pipeline runnable and testable without pretrained weights.

// `!(x > 0.0)` style checks are deliberate: NaN has to fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod backends;
pub mod dso;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod manifest;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod types;

pub use audio::{amplify, AudioClip};
pub use error::{Error, Result, Stage};
pub use tensor::{read_tensor, write_tensor, LatentConditioning, LatentGrid, TensorBuffer};
pub use types::{AttentionKind, AttentionVector, Caption, GeneratedImage, TokenWeights};

//! Test-time visual prompt adaptation for small vision transformers.
//!
//! A frozen ViT classifier is adapted to distribution shift at inference
//! time by optimizing a small set of visual prompts (additive token offsets
//! or prepended learnable tokens with a zero-initialized attention gate) on
//! unlabeled test data. Three regimes are supported: batched-image (entropy
//! minimization over a batch), single-image (marginal entropy over augmented
//! views with confidence selection), and pseudo-label (kNN soft labels from
//! a FIFO memory queue with weak/strong augmentation).
//!
//! See the crate `examples/` for runnable entry points per capability.

pub mod augment;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod objectives;
pub mod prompt;
pub mod tensor;
pub mod vit;

pub use error::{Result, VpaError};
pub use tensor::Tensor;

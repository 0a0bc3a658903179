//! Prompt-driven open-set semi-supervised learning.
//!
//! A frozen encoder is adapted to unlabeled data that mixes in-distribution
//! (ID) and out-of-distribution (OOD) samples by training nothing but two
//! additive border prompts. Outliers are detected in a standardized feature
//! space: tangent hyperplanes around the labeled cluster pick an initial OOD
//! set, and an Apollonius circle between the ID and OOD centers then makes
//! the running ID/OOD decision.
//!
//! Module map:
//!
//! - [`data`]: synthetic open-set datasets, CIFAR-10 binary loading, splits, augmentation
//! - [`prompt`]: padding-template visual prompts and their adjoint
//! - [`nnet`]: the small encoder + classifier with hand-written reverse mode
//! - [`joint_space`]: ID cluster, tangent candidates, Apollonius classifier
//! - [`losses`]: cross-entropy, pseudo-label, consistency and prompt-contrastive terms
//! - [`pipeline`]: pre-training and prompt-only fine-tuning
//! - [`eval`]: AUROC, closed-set accuracy, variant comparison
//! - [`checkpoint`]: on-disk formats for prompts, models and stage states

pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
mod image;
pub mod joint_space;
pub mod losses;
pub mod nnet;
pub mod pipeline;
pub mod prompt;
mod real;

pub use error::{Error, Result};
pub use image::{Geometry, Image};
pub use real::Real;

//! Multimodal joint-embedding pre-training for human activity recognition.
//!
//! Text, video, pose and accelerometer windows are mapped into one shared
//! 1280-dimensional space by per-modality encoder/projection pairs trained
//! with a pairwise symmetric InfoNCE objective. The crate also provides the
//! downstream fine-tuning and zero-shot evaluation protocols, three proxy-task
//! pre-training baselines, a synthetic multimodal corpus, and the small tensor
//! engine everything runs on.

pub mod baselines;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod models;
pub mod pretrain;
pub mod tensor;
pub mod zeroshot;

pub use error::{Error, Result};

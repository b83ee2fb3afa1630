//! Zero-shot cross-lingual spoken language understanding: a label-aware joint
//! intent/slot model trained with code-switching and multi-level contrastive
//! losses, plus the corpus, augmentation, negative-mining and evaluation
//! tooling around it.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod codeswitch;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod lajoint;
pub mod mcl;
pub mod negpool;
pub mod trainer;

pub use error::{Error, Result};

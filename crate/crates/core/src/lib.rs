//! Context-aware self-attentive NLU: joint intent classification and slot
//! labeling for multi-turn dialogue, with non-contextual and recurrent
//! context baselines.

pub mod context_fusion;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

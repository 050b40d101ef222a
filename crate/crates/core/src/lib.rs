//! Anatomy-aligned patch contrastive pre-training on synthetic 3D volumes.

pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod phantom;
pub mod registration;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};

//! Augmentations, per-landmark negative queues and the contrastive objectives.

mod augment;
mod bank;
mod loss;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentationConfig};
pub use bank::{MemoryBank, Negatives, Provenance};
pub use loss::{combined_loss, local_loss, local_loss_value, neighbor_loss, neighbor_loss_value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Neighbour count; 0 turns the neighbourhood term off.
    pub neighbors: usize,
    pub negatives: usize,
    pub queue_capacity: usize,
    pub key_momentum: f64,
    pub augmentation: AugmentationConfig,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            neighbors: 2,
            negatives: 16,
            queue_capacity: 64,
            key_momentum: 0.999,
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.negatives > self.queue_capacity {
            return Err(Error::Config(format!(
                "{} negatives exceed the queue capacity {}",
                self.negatives, self.queue_capacity
            )));
        }
        if !(0.0..1.0).contains(&self.key_momentum) {
            return Err(Error::Config("key_momentum must lie in [0, 1)".into()));
        }
        self.augmentation.validate()
    }
}

//! Cross-residual networks and fine-tuned ResNet baselines: architecture
//! specs, a built-in registry, static cost analysis, data loading and a
//! training driver.

pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod registry;
pub mod train;

pub use arch::{ArchitectureSpec, BlockKind, JumperKind, Violation};
pub use cost::{CostReport, Comparison};
pub use error::{Error, Result};
pub use model::Model;
pub use train::{TrainConfig, TrainLog, Trainer};

pub use cresnet_tensor as tensor;

//! The full network, its configuration, training loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{parse_kv, ModelConfig, Shortcut};
pub use network::{argmax_rows, Model};
pub use train::{cosine_lr, evaluate, AdamW, StepReport, TrainConfig, Trainer};

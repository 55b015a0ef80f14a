//! Data, configuration, optimizer, checkpoints and the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod io;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, peek_config, save_checkpoint};
pub use config::{DataConfig, EnvOverrides, RunConfig, TrainConfig};
pub use data::{gen_synthetic, gen_synthetic_with, SyntheticSpec, VolumeRecord};
pub use optim::{AdamState, AdamWConfig};
pub use train::{evaluate_model, load_records, EvalReport, StepLog, TrainState, Trainer};

//! Model assembly, training and persistence.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, FORMAT_VERSION};
pub use config::{Ablation, AugmentConfig, DecoderConfig, EncoderConfig, GateGranularity, ModelConfig, TrainConfig};
pub use model::{masked_mse_loss, ForwardNodes, MaskedAutoencoder, Reconstruction};
pub use optim::AdamW;
pub use schedule::WarmupCosine;
pub use train::{resume, train, train_with_observer, DivergenceReport, LossRecord, TrainObserver, TrainOutcome};

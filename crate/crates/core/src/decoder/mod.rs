//! Flow-matching mel decoder: model, objective, sampler and training.

pub mod checkpoint;
pub mod config;
pub mod flow;
pub mod layers;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{DecoderConfig, OptimConfig, Positional};
pub use model::{DitModel, VelocityField};
pub use optim::AdamW;
pub use sampler::{sample, sample_from, sway_schedule, SampleRequest, SamplerConfig};
pub use train::{TrainItem, Trainer, TrainerConfig};

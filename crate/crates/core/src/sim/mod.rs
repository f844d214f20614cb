//! Seeded synthetic benchmark and the teacher-student training loop.

pub mod model;
pub mod noise;
pub mod scene;
pub mod trainer;

pub use model::{Proposal, ProposalConfig, ToyModel};
pub use noise::{corrupt_predictions, ChannelKind, NoiseChannel};
pub use scene::{generate_scene, SceneConfig, SyntheticScene};
pub use trainer::{ema_update, run_training, EmaConfig, TrainSchedule, TrainerConfig, Variant};

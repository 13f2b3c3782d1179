//! Convolutional actor-critic and its clipped-surrogate trainer.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod net;
pub mod ppo;
pub mod real;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use dist::{mean_action, sample_action, SampledAction};
pub use gradcheck::{grad_check, GradCheckReport, GradSubset};
pub use net::{NetSpec, PolicyNet};
pub use ppo::{gae, ppo_update, Adam, RolloutBatch, TrainConfig};
pub use real::Real;
pub use train::{evaluate, train, EpisodeSetup, EvalPolicy, EvalStats};

//! Deep Q-learning over text trajectories: config, TD updates, checkpoints
//! and the training loop.

pub mod checkpoint;
mod config;
mod run;
mod td;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{epsilon_at, TrainConfig};
pub use run::{
    evaluate, rng_from_words, rng_words, run_training, stream_rng, EvalOptions, EvalReport, MetricRecord, Recorder, StateBuilder, Stream,
    TrainObserver, TrainSetup, TrainSummary,
};
pub use td::{act, max_q, td_step, td_target, TdOutcome, TdSample};

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::game::GameError;
use crate::numerics::NumericsError;
use crate::replay::ReplayError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("incompatible network: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("writing checkpoint at step {step}: {source}")]
    CheckpointWrite { step: u64, source: std::io::Error },
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

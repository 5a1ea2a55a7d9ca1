//! Foreground verification: score each foreground candidate by appearance
//! similarity to the template and by overlap with background objects, then
//! pick the best.

mod scoring;
mod triplet;

use thiserror::Error;

use crate::backends::BackendError;
use crate::geometry::BBox;

pub use self::scoring::{
    background_scores, combine_and_select, foreground_scores, score_frame, ScoredProposal, Selection, TemplateEmbedding,
};
pub use self::triplet::{
    train_toy_embedder, triplet_loss, triplet_loss_and_grad, LinearEmbedder, TrainConfig, TripletBatch,
};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("template crop at {0} is empty")]
    EmptyTemplate(BBox),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid triplet batch: {0}")]
    InvalidBatch(String),
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

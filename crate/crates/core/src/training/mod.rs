//! Optimizer, the l2 regression step, contrastive pretraining and the
//! epoch loop that drives both phases.

mod eval;
mod optim;
mod pairwise;
mod regression;
mod train;

pub use eval::{correlations, default_threads, evaluate, pairwise_accuracy, LoadedSet};
pub use optim::{Adam, AdamConfig, LrSchedule, Moments};
pub use pairwise::{
    derive_preference, labelled_pairs, naive_pairwise_grads, pairwise_grads, Comparator, LabelMode, PairwiseOutcome,
};
pub use regression::{regression_grads, regression_step};
pub use train::{load_scoring_model, EpochLog, Phase, Trainer};

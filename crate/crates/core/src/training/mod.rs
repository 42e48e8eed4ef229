//! Search stage (fit the mixer against a frozen teacher), task stage
//! (train a fresh classifier on mixed batches) and evaluation.

mod eval;
mod loss;
mod metrics;
mod search;
mod task;

pub use eval::{evaluate, label_rank, topk_hits, Accuracy};
pub use loss::{soft_cross_entropy, SIMPLEX_TOLERANCE};
pub use metrics::{EpochMetrics, RunMetrics, METRICS_HEADER, METRICS_SCHEMA};
pub use search::{search_loss, search_step, train_mixer, DivergenceGuard, SearchConfig, SearchRun, SearchStep};
pub use task::{
    augmenter_for, task_step, train_task, BatchAugmenter, CutMixAugmenter, LearnedMixer, LrSchedule, MixupAugmenter,
    NoMix, Strategy, TaskConfig, TaskRun,
};

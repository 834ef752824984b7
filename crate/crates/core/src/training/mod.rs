//! Loss, optimization loop, metrics and persisted artifacts.

mod checkpoint;
mod metrics;
mod run;
mod train;

pub use checkpoint::{load_model, Checkpoint};
pub use metrics::{average_ranks, evaluate_metrics, mae, mse, pearson, spearman, Metrics};
pub use run::{run_training, split_spec, Manifest, RunOutput};
pub use train::{
    noise_rng, predict_all, thread_pool, train, write_history, write_predictions, EpochRecord,
    TrainOutcome, HISTORY_HEADER, THREADS_ENV,
};

//! Objective assembly, the training loop and the evaluation stack.

mod eval;
mod loss;
mod metrics;
mod optim;
mod pool;
mod report;
mod train;

pub use eval::{
    ablation_variants, disentanglement_cosine, eval_condition, eval_inter, eval_intra, predict_samples, run_ablation,
    AblationResult, Condition, ConditionResult, EvalReport, INTRA_RATES,
};
pub use loss::{task_loss, total_loss};
pub use metrics::{class_index, compute_metrics, MetricRow, Metrics, CLASSES};
pub use optim::{cosine_lr, AdamW};
pub use pool::{par_map, worker_count, WORKERS_ENV};
pub use report::{
    ablation_inter_csv, ablation_intra_csv, confusion_csv, history_csv, report_csv, summary, ABLATION_INTER_HEADER,
    ABLATION_INTRA_HEADER, HISTORY_HEADER, REPORT_HEADER,
};
pub use train::{
    select_epoch, selection_split, split_mae, train, train_from, train_observed, EpochRecord, StepView, TrainOutcome,
};

use crate::config::ConfigError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("training diverged at step {step} (epoch {epoch}); last finite losses (task, dec, rec): {last_finite:?}")]
    Diverged {
        step: usize,
        epoch: usize,
        last_finite: Option<[f64; 3]>,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

//! Metrics, leave-one-speaker-out folds, SNR-sweep evaluation and
//! embedding export.

mod embed;
mod loso;
mod metrics;
mod report;

pub use embed::{
    centroid_shift, collect_embeddings, embedding_conditions, read_embeddings_csv, write_embeddings_csv, EmbeddingRow,
};
pub use loso::{loso_splits, Fold, FoldData as FoldPartition};
pub use metrics::ConfusionMatrix;
pub use report::{
    average_reports, conditions, evaluate_models, Condition, ConditionResult, EvalReport, EvalSettings, Summary,
};

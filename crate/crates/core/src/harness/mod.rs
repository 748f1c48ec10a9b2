//! Datasets, training, evaluation and grid sweeps.

mod config;
mod data;
mod metrics;
mod optim;
mod sweep;
mod train;

pub use config::{DataSource, ExperimentConfig, ModelHyper, Task};
pub use data::{
    generate_classification_dataset, generate_translation_dataset, load_splits, read_jsonl,
    rewrite_lang_a, split_sizes, ClassificationExample, Splits, TranslationExample,
    CLASSIFICATION_TEMPLATES,
};
pub use metrics::{corpus_bleu, macro_f1};
pub use optim::Adam;
pub use sweep::{
    cell_label, grid, pareto_points, run_sweep, write_outputs, CellSummary, RunRow, SweepReport,
};
pub use train::{
    batch_loss, evaluate, evaluation_flops, merged_length, train, EpochRecord, PreparedData,
    Sample, TrainResult,
};

//! Model assembly, two-stage training, checkpoints and AP evaluation.

pub mod config;
pub mod dataset;
pub mod eval;
pub mod model;
pub mod report;
pub mod train;

pub use config::{DataConfig, EvalCondition, EvalProtocol, ModelConfig, RunConfig, Stage, TrainConfig, Variant};
pub use dataset::{Dataset, PreparedSample, SceneData, TemporalSample};
pub use eval::{average_precision, evaluate, prediction_stats, APReport, PredictionStats, ReportMeta};
pub use model::{BatchInput, ForwardOutput, Model};
pub use report::{parse_csv, report_table, TableFormat};
pub use train::{
    checkpoint_meta, load_checkpoint, load_partial_checkpoint, save_checkpoint, total_loss, train, EpochLog, PartialLoadReport,
    TrainOutcome,
};

use crate::detection_head::Targets;
use crate::error::Result;

pub(crate) fn dataset_targets(batch: &[&PreparedSample]) -> Result<Targets> {
    let parts: Vec<&Targets> = batch.iter().map(|s| &s.targets).collect();
    Targets::stack(&parts)
}

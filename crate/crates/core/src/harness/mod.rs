//! Operational surface: configuration, checkpointing, metrics, the
//! training/evaluation loops, dataset generation, personalization, and
//! attention export.

pub mod attention_dump;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod generate;
pub mod metrics;
pub mod personalize;
pub mod train;

pub use attention_dump::{dump_attention, read_attention, AttentionDump};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint, CHECKPOINT_VERSION};
pub use config::{DataConfig, ExperimentConfig, GenerateConfig, OutputConfig, TrainConfig};
pub use eval::{evaluate_model, evaluate_with, write_report, EvalReport};
pub use generate::{generate_dataset, generate_in_memory, GenerateSummary};
pub use metrics::{MetricsRecord, MetricsWriter};
pub use personalize::{
    adapt_once, personalize, pretrain_gps, PersonalizationArtifact, PersonalizeReport,
    PretrainedGps,
};
pub use train::{resume, train, TrainOutcome};

//! Configuration, training, evaluation, persistence and reporting.

mod checkpoint;
mod commands;
mod config;
mod eval;
mod gradsuite;
mod report;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, MAGIC, VERSION};
pub use commands::{
    cmd_analyze, cmd_bench, cmd_eval, cmd_flops, cmd_gradcheck, cmd_synth, cmd_train, exit_code, frequency_summary,
    gradient_checks, identity_checks, reference_comparison, vanilla_flops, BenchRow, CommandOptions, FrequencyEntry,
    FrequencySummary, IdentityCheck, ModuleShare, Outcome, PeriodicEval, ReferenceComparison, CHECKPOINT_FILE,
    FLOPS_BAND, IDENTITY_SPECS, MODEL_PROBES, PARAMS_BAND, REFERENCE_FLOPS, REFERENCE_PARAMS, REFERENCE_SIZE,
};
pub use config::{
    preset, AnalyzeConfig, BenchConfig, DataConfig, EvalConfig, OptimConfig, RunConfig, TrainConfig,
};
pub use eval::{
    evaluate, evaluate_degraded, load_manifest_items, robustness_sweep, score_image, EvalItem, EvalSummary,
    ImageMetrics, ItemError, KindSummary, SweepCurve, SweepPoint,
};
pub use gradsuite::{ewtb_check, model_check, primitive_suite, GradCheckResult, MODEL_TOLERANCE, PRIMITIVE_TOLERANCE};
pub use report::{to_json, write_report, Environment, Report};
pub use train::{batch_loss, Augment, Batch, StepLog, TrainItem, Trainer};

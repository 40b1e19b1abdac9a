//! Training loops, evaluation, and experiment harnesses.

pub mod ablation;
pub mod elbo;
pub mod evaluate;
pub mod finetune;
pub mod metrics;
pub mod pretrain;
mod train;

pub use ablation::{format_ablation_table, run_ablation_suite, write_ablation_csv, AblationArm, AblationConfig, AblationRow};
pub use elbo::{evaluate_elbo, gaussian_log_density, ElboReport};
pub use evaluate::{
    accuracy, evaluate, mean_iou, predict_classes, predict_segments, EvalResult, IouReport, Task,
};
pub use finetune::{epochs_to_fraction, finetune, FinetuneConfig, FinetuneOutput};
pub use metrics::{read_metrics_csv, series, write_metrics_csv, MetricsRecord};
pub use pretrain::{
    evaluate_mim, pretrain_all_tokens, pretrain_mim, pretrain_pixel, run_pretrain, step_masks, MimEval, Objective, PixelStats,
    PretrainConfig, PretrainOutput,
};

//! Configuration, training, two-stage inference, evaluation and ablations.

mod ablation;
mod config;
mod infer;
mod train;
mod visualize;

pub use ablation::{ablation_run, AblationRow, AblationTable, AblationVariant};
pub use config::{
    NetworkConfig, Overrides, PathsConfig, PipelineConfig, RouterConfig, RouterMethod, SamPlacement, SchemeConfig,
    SyntheticConfig, TrainConfig, TrainTarget,
};
pub use infer::{
    evaluate, evaluate_net, load_samples, robust_side_infer, route, DepthNet, EvaluationReport, ImageEvaluation, ModelSet,
    Sample, SceneContext,
};
pub use train::{train, StepRecord, TrainOutputs, TrainReport, Trainer, ValidationRecord};
pub use visualize::side_by_side;

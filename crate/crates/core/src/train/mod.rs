//! Deterministic desk-scale training: configuration, synthetic data, ROI
//! sampling, the toy model, and the staged SGD loop.

pub mod config;
pub mod data;
pub mod model;
pub mod runner;
pub mod sampler;
pub mod schedule;

pub use config::{ClipMode, ContextKind, ExperimentConfig, ScaleInit, Stage};
pub use data::{generate_shapes_dataset, proposal_recall, ShapesConfig, SyntheticScene};
pub use model::{IonModel, LossReport};
pub use runner::{
    accumulate_gradients, build_model, clip_model_gradient, curve_to_csv, datasets, detect, evaluate_model,
    raw_detections, run_experiment, run_staged_training, train_step_accumulating, CurvePoint, ExperimentOutcome,
    Optimizer, StepReport,
};
pub use sampler::{sample_rois, SampledRoi, SamplerConfig};
pub use schedule::{clip_gradient, lr_at, LrSchedule};

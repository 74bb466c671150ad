//! Synthetic benchmark, training loop, and seen/unseen evaluation.

pub mod benchmark;
pub mod metrics;
pub mod train;

pub use benchmark::{
    generate_benchmark, Benchmark, ClassSpec, OntologySpec, SceneObject, SceneSet,
    SyntheticOntology, ToyScene,
};
pub use metrics::{
    evaluate, harmonic_mean, iou_from_confusion, round1, ClassIou, MatchingDiagnostics,
    MetricsReport,
};
pub use train::{
    log_to_csv, train, LogRow, ModelParams, TrainConfig, TrainDiagnostics, TrainedModel, LOG_HEADER,
};

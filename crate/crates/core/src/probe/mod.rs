//! Linear progress probes on hidden-state features.

pub mod eval;
pub mod features;
pub mod heatmap;
pub mod model;

pub use eval::{
    evaluate_probe, expected_progress, percent_mae, predict_top1, score_buckets, top1, BucketDistribution,
    ProbeEvaluation,
};
pub use features::{build_features, read_feature_manifest, FeatureMode, HiddenStateMatrix, DEFAULT_QUESTION_TOKENS};
pub use heatmap::{heatmap, HeatmapGroup, TraceDistributions, DEFAULT_GRID_POINTS};
pub use model::{cross_entropy, cross_entropy_grad, train_probe, ProbeModel, ProbeSpec, TrainConfig, TrainReport};

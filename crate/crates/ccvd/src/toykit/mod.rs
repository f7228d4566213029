//! Synthetic continual-customization fixtures and evaluation.
//!
//! Subjects are colored shapes, motions are trajectories of a neutral shape,
//! and a deterministic hand-built embedder stands in for learned encoders so
//! alignment metrics are meaningful at desk scale.

pub mod concepts;
pub mod embed;
pub mod experiment;
pub mod metrics;

pub use concepts::{
    generate_task_data, render_reference_clips, ColorName, ConceptAppearance, ShapeKind,
    ToyConcept, Trajectory,
};
pub use embed::{cosine, embed_text, embed_video, structure_cosine, EMBED_DIM};
pub use experiment::{
    run_forgetting_comparison, standard_fixture, ComparisonReport, ExperimentSettings,
    FixtureTask, PathForgetting,
};
pub use metrics::{
    evaluate, evaluate_with, forgetting_curve, ConceptScores, EvalSettings, ForgettingReport,
    MetricReport,
};

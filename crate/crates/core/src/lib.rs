//! Surfacing systematically mislabeled training examples through influence tracing.
//!
//! A student classifier is distilled from a compromised teacher, probed with
//! a handful of known mislabeled-class examples, and every training example is
//! scored by how much it drove the probes' wrong predictions. Top-ranked
//! examples are then relabeled (fixed or flipped) and the student retrained.

pub mod config;
pub mod decisions;
pub mod distill;
pub mod error;
pub mod example;
pub mod formats;
pub mod influence;
pub mod model;
pub mod pipeline;
pub mod surfacing;
pub mod vector;

pub use config::{PipelineConfig, RobustnessConfig};
pub use decisions::DecisionRecord;
pub use distill::{
    distill_student, generate_corpus, select_prefix_by_mean, CohortCluster, Corpus, CorpusSpec, DistillOutcome,
    PrefixSelection, SplitCounts, TeacherOracle,
};
pub use error::{Error, Result};
pub use example::{Cohort, Example, ExampleId, Label};
pub use influence::{
    embedding_influence, exact_inverse_hvp, if_influence, lissa_inverse_hvp, trackin_influence, trainloss_influence,
    wrong_label, InfluenceEngine, InfluenceScore, LissaConfig, LissaEstimate, Method, SolverMode,
};
pub use model::{train, Architecture, Checkpoint, Forward, LabelSource, StudentModel, TrainConfig};
pub use pipeline::{EvalRow, Run, Stage, StageManifest, SurfacingSummary};
pub use surfacing::{
    apply_and_retrain, apply_plan, build_plan, evaluate, precision_at_k, random_baseline, rank_by_influence,
    rank_distribution, Aggregation, EvalReport, RankHistogram, RankTable, RemediationMode, RemediationPlan,
};

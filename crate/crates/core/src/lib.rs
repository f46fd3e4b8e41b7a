//! Federated RLHF reward aggregation at desk scale.
//!
//! Groups hold private target distributions over answer options and score
//! the policy's outputs locally; the server aggregates the per-group rewards
//! (min, max, average, fixed-α consensus or the fairness-gated adaptive
//! scheme) and trains a categorical policy with a clipped-surrogate PPO step.

pub mod aggregate;
pub mod error;
pub mod experiment;
pub mod fairness;
pub mod fedsim;
pub mod metrics;
pub mod numeric;
pub mod policy;
pub mod prefdata;

pub use aggregate::{
    AggregatedReward, AggregationStrategy, AlignmentHistory, Gate, GroupRewardMatrix,
};
pub use error::{Error, Result};
pub use experiment::{ExperimentConfig, GridSpec, Overrides, RunReport};
pub use fairness::FairnessReport;
pub use metrics::{MetricKind, MetricValue, Prediction};
pub use policy::{PolicyParams, PpoConfig, Rollout, TaskKind};
pub use prefdata::{DatasetFormat, PreferenceDataset, Question, SyntheticSpec};
pub use fedsim::{
    EarlyStop, EvaluationRecord, Federation, FederationConfig, LogLine, MetricEvaluation, RoundRecord,
    ScoreKind, ServerState, TrainingOutcome, TrainingPlan,
};

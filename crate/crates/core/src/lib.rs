//! Per-utterance credit assignment for dialogue agents: coalition games over
//! agent turns, exact and sampled Shapley estimators, rollout-based
//! coalition values and a batch attribution pipeline.

pub mod error;
pub mod fixtures;
pub mod game;
pub mod kernelshap;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod rollout;
pub mod shapley;
pub mod validate;

pub use error::{Error, OracleError, OracleErrorKind, Result};
pub use game::{Coalition, FnGame, PlayerSet, TableGame, ValueCache, ValueOracle, ValueSample};
pub use kernelshap::{
    build_sampling_plan, kernelshap, shap_kernel_weight, solve_kernelshap, RegressionDiagnostics, SamplingPlan,
    WeightedCoalitionSample,
};
pub use pipeline::{attribute_episode, normalize_rewards, AttributionConfig, AttributionResult, Attributor, EpisodeInput};
pub use rollout::{reconstruct_history, Episode, EpisodeGame, RolloutBackend, Speaker, Turn, UtilityWeights};
pub use shapley::{exact_shapley, permutation_shapley, ShapleyVector};

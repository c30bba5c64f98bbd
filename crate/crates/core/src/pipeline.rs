//! End-to-end reward computation for one episode: coalition selection,
//! rollout valuation, the configured solver, and min-max normalization,
//! followed by emission of `(context, action, score)` training records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game::{all_coalitions, Coalition, ValueCache};
use crate::kernelshap::{build_sampling_plan, kernelshap, RegressionDiagnostics};
use crate::oracle::external::{external_value_oracle, ExternalOracle, ExternalOracleConfig, WireTurn};
use crate::oracle::sim::{sim_rollout_backend, RandomGameOptions, SimGameSpec};
use crate::rng;
use crate::rollout::{
    Episode, EpisodeGame, RolloutBackend, Speaker, UtilityWeights, DEFAULT_MAX_FUTURE_TURNS, DEFAULT_ROLLOUTS,
};
use crate::shapley::{exact_shapley, permutation_average, prefix_coalitions, sample_permutations, ShapleyVector};

/// Normalized scores span `[0, NORMALIZED_MAX]`.
pub const NORMALIZED_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Permutation,
    Kernelshap,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SolverKind::Exact),
            "permutation" => Ok(SolverKind::Permutation),
            "kernelshap" => Ok(SolverKind::Kernelshap),
            other => Err(Error::Config(format!("unknown solver {other:?}"))),
        }
    }
}

impl std::fmt::Display for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverKind::Exact => "exact",
            SolverKind::Permutation => "permutation",
            SolverKind::Kernelshap => "kernelshap",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    External,
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(BackendKind::Sim),
            "external" => Ok(BackendKind::External),
            other => Err(Error::Config(format!("unknown backend {other:?}"))),
        }
    }
}

/// Settings for games generated when an episode does not embed its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSettings {
    pub game_seed: u64,
    pub synergy_scale: f64,
    pub partner_response_gain: f64,
    pub noise_std: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        let d = RandomGameOptions::default();
        SimSettings {
            game_seed: 0,
            synergy_scale: d.synergy_scale,
            partner_response_gain: d.partner_response_gain,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub solver: SolverKind,
    /// Rollouts per coalition (J).
    pub rollouts: u32,
    pub num_permutations: usize,
    pub base_seed: u64,
    pub utility_weights: UtilityWeights,
    pub max_future_turns: usize,
    pub backend: BackendKind,
    /// Parallel coalition evaluations; does not affect results.
    pub jobs: usize,
    pub sim: SimSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalOracleConfig>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            solver: SolverKind::Kernelshap,
            rollouts: DEFAULT_ROLLOUTS,
            num_permutations: 1000,
            base_seed: 0,
            utility_weights: UtilityWeights::default(),
            max_future_turns: DEFAULT_MAX_FUTURE_TURNS,
            backend: BackendKind::Sim,
            jobs: 1,
            sim: SimSettings::default(),
            external: None,
        }
    }
}

impl AttributionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: AttributionConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 {
            return Err(Error::Config("rollouts must be at least 1".into()));
        }
        if self.num_permutations == 0 {
            return Err(Error::Config("num_permutations must be at least 1".into()));
        }
        self.utility_weights.validate()?;
        if self.backend == BackendKind::External {
            match &self.external {
                Some(ext) => ext.validate()?,
                None => return Err(Error::Config("backend = external needs an [external] section".into())),
            }
        }
        Ok(())
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form of every
    /// setting that can influence results (`jobs` excluded).
    pub fn fingerprint(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("jobs");
        }
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One input episode plus an optional simulated game attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInput {
    pub episode: Episode,
    pub sim_game: Option<SimGameSpec>,
}

#[derive(Debug, Deserialize)]
struct EpisodeFileTurn {
    speaker: String,
    text: String,
}

#[derive(Debug, Deserialize)]
struct EpisodeFile {
    episode_id: String,
    #[serde(default)]
    scenario: String,
    #[serde(default)]
    agent_goal: String,
    #[serde(default)]
    partner_goal: String,
    turns: Vec<EpisodeFileTurn>,
    #[serde(default = "default_agent_label")]
    agent: String,
    #[serde(default)]
    sim: Option<SimGameSpec>,
}

fn default_agent_label() -> String {
    "agent".to_string()
}

impl EpisodeInput {
    /// Parses the episode JSON format. Turns whose `speaker` equals the
    /// `agent` label are the target agent's actions; all others are partner
    /// turns.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: EpisodeFile = serde_json::from_str(text)?;
        let turns = file.turns.into_iter().map(|t| {
            let speaker = if t.speaker == file.agent {
                Speaker::Agent
            } else {
                Speaker::Partner
            };
            (speaker, t.text)
        });
        let episode = Episode::new(file.episode_id, file.scenario, file.agent_goal, file.partner_goal, turns)?;
        if let Some(game) = &file.sim {
            game.validate()?;
            if game.n != episode.num_actions() {
                return Err(Error::InvalidEpisode(format!(
                    "embedded sim game has {} players but the episode has {} agent actions",
                    game.n,
                    episode.num_actions()
                )));
            }
        }
        Ok(EpisodeInput {
            episode,
            sim_game: file.sim,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The episode JSON form accepted by [`EpisodeInput::from_json`].
    pub fn to_json(&self) -> String {
        let turns: Vec<serde_json::Value> = self
            .episode
            .turns
            .iter()
            .map(|t| {
                serde_json::json!({
                    "speaker": match t.speaker { Speaker::Agent => "agent", Speaker::Partner => "partner" },
                    "text": t.text,
                })
            })
            .collect();
        let mut value = serde_json::json!({
            "episode_id": self.episode.episode_id,
            "scenario": self.episode.scenario,
            "agent_goal": self.episode.agent_goal,
            "partner_goal": self.episode.partner_goal,
            "turns": turns,
            "agent": "agent",
        });
        if let Some(game) = &self.sim_game {
            value["sim"] = serde_json::to_value(game).expect("sim game serializes");
        }
        serde_json::to_string_pretty(&value).expect("episode serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlanSummary {
    pub solver: SolverKind,
    pub coalitions_evaluated: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mandatory: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampled: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exhaustive: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_permutations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub episode_id: String,
    pub raw_phi: ShapleyVector,
    pub normalized_phi: Vec<f64>,
    pub sampling_plan_summary: SamplingPlanSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<RegressionDiagnostics>,
    pub config_fingerprint: String,
}

/// Min-max scaling to `[0, 10]`. A constant input maps to 5.0 everywhere.
pub fn normalize_rewards(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Domain("nothing to normalize".into()));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("raw attribution {v}")));
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![NORMALIZED_MAX / 2.0; raw.len()]);
    }
    let span = max - min;
    Ok(raw
        .iter()
        .map(|&v| (NORMALIZED_MAX * ((v - min) / span)).clamp(0.0, NORMALIZED_MAX))
        .collect())
}

enum Backend {
    Sim,
    External(ExternalOracle),
}

/// Runs attributions under one configuration, reusing a single external
/// connection across episodes.
pub struct Attributor {
    config: AttributionConfig,
    fingerprint: String,
    backend: Backend,
}

impl Attributor {
    pub fn new(config: AttributionConfig) -> Result<Self> {
        config.validate()?;
        let backend = match config.backend {
            BackendKind::Sim => Backend::Sim,
            BackendKind::External => {
                let ext = config.external.clone().expect("validated external section");
                Backend::External(external_value_oracle(ext)?)
            }
        };
        Ok(Attributor {
            fingerprint: config.fingerprint(),
            config,
            backend,
        })
    }

    pub fn config(&self) -> &AttributionConfig {
        &self.config
    }

    /// The simulated game used for an episode under the sim backend.
    pub fn sim_game_for(&self, input: &EpisodeInput) -> Result<SimGameSpec> {
        if let Some(game) = &input.sim_game {
            return Ok(game.clone());
        }
        let settings = &self.config.sim;
        SimGameSpec::random(
            input.episode.num_actions(),
            rng::derive_seed(settings.game_seed, &format!("game:{}", input.episode.episode_id)),
            RandomGameOptions {
                synergy_scale: settings.synergy_scale,
                partner_response_gain: settings.partner_response_gain,
                noise_std: settings.noise_std,
            },
        )
    }

    pub fn attribute(&self, input: &EpisodeInput) -> Result<AttributionResult> {
        input.episode.validate()?;
        match &self.backend {
            Backend::Sim => {
                let game = self.sim_game_for(input)?;
                let backend = sim_rollout_backend(&game, &self.config.utility_weights, self.config.max_future_turns)?;
                self.attribute_with(&input.episode, &backend)
            }
            Backend::External(oracle) => self.attribute_with(&input.episode, oracle),
        }
    }

    /// Attribution against an arbitrary rollout backend.
    pub fn attribute_with(&self, episode: &Episode, backend: &dyn RolloutBackend) -> Result<AttributionResult> {
        let config = &self.config;
        let game = EpisodeGame {
            episode,
            backend,
            weights: &config.utility_weights,
            rollouts: config.rollouts,
            base_seed: config.base_seed,
        };
        let n = episode.num_actions();
        let players = episode.players();
        let cache = ValueCache::new();
        let id = &episode.episode_id;

        let (raw_phi, diagnostics, mut summary) = match config.solver {
            SolverKind::Exact => {
                let coalitions = all_coalitions(n)?;
                cache.evaluate_batch(&game, &coalitions, config.jobs)?;
                let phi = exact_shapley(&game, &cache)?;
                (phi, None, summary(config.solver))
            }
            SolverKind::Kernelshap => {
                let plan = build_sampling_plan(n, rng::derive_seed(config.base_seed, &format!("plan:{id}")))?;
                cache.evaluate_batch(&game, &plan.coalitions(), config.jobs)?;
                let (phi, diag) = kernelshap(&game, &cache, &plan)?;
                let s = SamplingPlanSummary {
                    budget_k: Some(plan.budget_k),
                    mandatory: Some(plan.mandatory.len()),
                    sampled: Some(plan.sampled.len()),
                    exhaustive: Some(plan.exhaustive),
                    ..summary(config.solver)
                };
                (phi, Some(diag), s)
            }
            SolverKind::Permutation => {
                let orders = sample_permutations(
                    n,
                    config.num_permutations,
                    rng::derive_seed(config.base_seed, &format!("perm:{id}")),
                );
                let mut needed = prefix_coalitions(&orders);
                needed.push(players.grand());
                cache.evaluate_batch(&game, &needed, config.jobs)?;
                let phi = permutation_average(&game, &cache, &orders)?;
                let s = SamplingPlanSummary {
                    num_permutations: Some(config.num_permutations),
                    ..summary(config.solver)
                };
                (phi, None, s)
            }
        };
        // the baselines are part of every plan
        debug_assert!(cache.get(Coalition::EMPTY.mask()).is_some());
        summary.coalitions_evaluated = cache.len();
        let normalized_phi = normalize_rewards(&raw_phi.values)?;
        Ok(AttributionResult {
            episode_id: id.clone(),
            raw_phi,
            normalized_phi,
            sampling_plan_summary: summary,
            diagnostics,
            config_fingerprint: self.fingerprint.clone(),
        })
    }
}

fn summary(solver: SolverKind) -> SamplingPlanSummary {
    SamplingPlanSummary {
        solver,
        coalitions_evaluated: 0,
        budget_k: None,
        mandatory: None,
        sampled: None,
        exhaustive: None,
        num_permutations: None,
    }
}

/// Attributes one episode: pure in `(input, config)`.
pub fn attribute_episode(input: &EpisodeInput, config: &AttributionConfig) -> Result<AttributionResult> {
    Attributor::new(config.clone())?.attribute(input)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordContext {
    pub scenario: String,
    pub agent_goal: String,
    pub partner_goal: String,
    /// Every turn strictly before the action.
    pub history: Vec<WireTurn>,
}

/// One reward-model training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub episode_id: String,
    pub action_index: usize,
    pub context: RecordContext,
    pub action_text: String,
    pub score: f64,
}

pub fn reward_records(episode: &Episode, result: &AttributionResult) -> Result<Vec<RewardRecord>> {
    if result.episode_id != episode.episode_id {
        return Err(Error::Domain(format!(
            "result for {:?} does not belong to episode {:?}",
            result.episode_id, episode.episode_id
        )));
    }
    if result.normalized_phi.len() != episode.num_actions() {
        return Err(Error::Domain(format!(
            "result has {} scores for {} actions",
            result.normalized_phi.len(),
            episode.num_actions()
        )));
    }
    Ok(episode
        .agent_action_indices
        .iter()
        .zip(&result.normalized_phi)
        .enumerate()
        .map(|(action_index, (&position, &score))| RewardRecord {
            episode_id: episode.episode_id.clone(),
            action_index,
            context: RecordContext {
                scenario: episode.scenario.clone(),
                agent_goal: episode.agent_goal.clone(),
                partner_goal: episode.partner_goal.clone(),
                history: episode.turns[..position]
                    .iter()
                    .map(|t| WireTurn {
                        speaker: t.speaker,
                        text: t.text.clone(),
                    })
                    .collect(),
            },
            action_text: episode.turns[position].text.clone(),
            score,
        })
        .collect())
}

/// Writes one JSON line per agent action, in action order. Each line is
/// written with a single `write_all`, so a failing sink never receives a
/// partial record from a later line.
pub fn emit_records(episode: &Episode, result: &AttributionResult, sink: &mut dyn Write) -> Result<usize> {
    let records = reward_records(episode, result)?;
    for record in &records {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        sink.write_all(line.as_bytes())?;
    }
    sink.flush()?;
    Ok(records.len())
}

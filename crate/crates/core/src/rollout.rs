//! Expected-utility valuation of coalitions: counterfactual history
//! reconstruction, policy-driven rollouts, and utility aggregation.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleError, OracleErrorKind, Result};
use crate::game::{Coalition, PlayerSet, ValueOracle, ValueSample, MAX_PLAYERS};
use crate::rng;

pub const DEFAULT_ROLLOUTS: u32 = 2;
pub const DEFAULT_MAX_FUTURE_TURNS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Partner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub position: usize,
}

/// A recorded interaction. Players are the target agent's turns, numbered
/// in dialogue order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub scenario: String,
    pub agent_goal: String,
    pub partner_goal: String,
    pub turns: Vec<Turn>,
    pub agent_action_indices: Vec<usize>,
}

impl Episode {
    /// Builds an episode from `(speaker, text)` pairs, numbering positions
    /// and inferring the agent's actions.
    pub fn new(
        episode_id: impl Into<String>,
        scenario: impl Into<String>,
        agent_goal: impl Into<String>,
        partner_goal: impl Into<String>,
        turns: impl IntoIterator<Item = (Speaker, String)>,
    ) -> Result<Self> {
        let turns: Vec<Turn> = turns
            .into_iter()
            .enumerate()
            .map(|(position, (speaker, text))| Turn {
                speaker,
                text,
                position,
            })
            .collect();
        let agent_action_indices = turns
            .iter()
            .filter(|t| t.speaker == Speaker::Agent)
            .map(|t| t.position)
            .collect();
        let episode = Episode {
            episode_id: episode_id.into(),
            scenario: scenario.into(),
            agent_goal: agent_goal.into(),
            partner_goal: partner_goal.into(),
            turns,
            agent_action_indices,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.agent_action_indices.len();
        if n == 0 || n > MAX_PLAYERS {
            return Err(Error::InvalidEpisode(format!(
                "episode {:?} has {n} agent actions; 1..=63 are supported",
                self.episode_id
            )));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.position != i {
                return Err(Error::InvalidEpisode(format!(
                    "turn positions must be contiguous from 0 (turn {i} has position {})",
                    t.position
                )));
            }
        }
        let mut prev = None;
        for &idx in &self.agent_action_indices {
            if prev.is_some_and(|p| idx <= p) {
                return Err(Error::InvalidEpisode("agent action indices must increase".into()));
            }
            match self.turns.get(idx) {
                Some(t) if t.speaker == Speaker::Agent => {}
                _ => {
                    return Err(Error::InvalidEpisode(format!(
                        "action index {idx} does not point at an agent turn"
                    )))
                }
            }
            prev = Some(idx);
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.agent_action_indices.len()
    }

    pub fn players(&self) -> PlayerSet {
        PlayerSet::new(self.num_actions()).expect("validated episode")
    }

    pub fn action_text(&self, action: usize) -> &str {
        &self.turns[self.agent_action_indices[action]].text
    }
}

/// H(S): the coalition's agent turns plus the partner turns answering them,
/// in original order and re-indexed from 0. Partner turns before the first
/// agent turn always survive.
pub fn reconstruct_history(episode: &Episode, coalition: Coalition) -> Vec<Turn> {
    let mut out = Vec::new();
    let mut player = 0usize;
    let mut previous_agent_kept: Option<bool> = None;
    for turn in &episode.turns {
        let keep = match turn.speaker {
            Speaker::Agent => {
                let keep = coalition.contains(player);
                player += 1;
                previous_agent_kept = Some(keep);
                keep
            }
            Speaker::Partner => previous_agent_kept.unwrap_or(true),
        };
        if keep {
            out.push(Turn {
                speaker: turn.speaker,
                text: turn.text.clone(),
                position: out.len(),
            });
        }
    }
    out
}

/// Per-dimension trajectory scores G_d.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimensionScores(pub BTreeMap<String, f64>);

impl DimensionScores {
    pub fn new(scores: impl IntoIterator<Item = (impl Into<String>, f64)>) -> Self {
        DimensionScores(scores.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    /// Checks every score is finite and within `[lo, hi]`.
    pub fn check_range(&self, lo: f64, hi: f64) -> std::result::Result<(), String> {
        for (k, &v) in &self.0 {
            if !v.is_finite() || v < lo || v > hi {
                return Err(format!("score {k}={v} outside [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

/// Non-negative dimension weights w_d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtilityWeights(pub BTreeMap<String, f64>);

impl Default for UtilityWeights {
    fn default() -> Self {
        UtilityWeights::new([("goal", 0.5), ("relationship", 0.3), ("knowledge", 0.2)])
            .expect("default weights are valid")
    }
}

impl UtilityWeights {
    pub fn new(weights: impl IntoIterator<Item = (impl Into<String>, f64)>) -> Result<Self> {
        let w = UtilityWeights(weights.into_iter().map(|(k, v)| (k.into(), v)).collect());
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("utility weights must be finite and non-negative".into()));
        }
        if self.0.values().sum::<f64>() <= 0.0 {
            return Err(Error::Config("utility weights must have a positive sum".into()));
        }
        Ok(())
    }

    pub fn dimensions(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// `U = Σ_d w_d · G_d`; no averaging over dimensions.
pub fn aggregate_utility(scores: &DimensionScores, weights: &UtilityWeights) -> Result<f64> {
    if scores.0.len() != weights.0.len() || scores.0.keys().any(|k| !weights.0.contains_key(k)) {
        let have: Vec<&String> = scores.0.keys().collect();
        let want: Vec<&String> = weights.0.keys().collect();
        return Err(Error::KeyMismatch(format!("scores {have:?} vs weights {want:?}")));
    }
    Ok(weights.0.iter().map(|(k, w)| w * scores.0[k]).sum())
}

/// One rollout to run from a reconstructed history.
#[derive(Debug, Clone)]
pub struct RolloutRequest<'a> {
    pub episode_id: &'a str,
    pub coalition_mask: u64,
    pub rollout_index: u32,
    pub rollout_seed: u64,
    pub history: &'a [Turn],
    pub agent_goal: &'a str,
    pub partner_goal: &'a str,
}

/// Anything that can run a rollout to completion and score it.
pub trait RolloutBackend: Sync {
    fn rollout(&self, request: &RolloutRequest<'_>) -> std::result::Result<DimensionScores, OracleError>;

    /// Runs a coalition's rollouts; backends able to pipeline requests
    /// override this.
    fn rollouts(
        &self,
        requests: &[RolloutRequest<'_>],
    ) -> Vec<std::result::Result<DimensionScores, OracleError>> {
        requests.iter().map(|r| self.rollout(r)).collect()
    }
}

/// A dialogue policy: next utterance, or `None` to end the dialogue.
pub trait Policy: Send + Sync {
    fn next_utterance(
        &self,
        history: &[Turn],
        goal: &str,
        seed: u64,
    ) -> std::result::Result<Option<String>, String>;

    /// Whether one instance may serve concurrent rollouts.
    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// A finished rollout: the reconstructed history followed by the
/// simulated continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub coalition_mask: u64,
    pub turns: Vec<Turn>,
    pub history_len: usize,
}

pub trait TrajectoryScorer: Send + Sync {
    fn score(&self, trajectory: &Trajectory, seed: u64) -> std::result::Result<DimensionScores, String>;

    fn concurrent_safe(&self) -> bool {
        true
    }
}

/// Agent and partner policies plus the driver-enforced horizon.
pub struct RolloutPolicyPair {
    pub agent_policy: Box<dyn Policy>,
    pub partner_policy: Box<dyn Policy>,
    pub max_future_turns: usize,
}

/// Runs rollouts in-process by alternating two policies, then scores the
/// trajectory. Calls are serialized when a component is not concurrency
/// safe.
pub struct PolicyRollout {
    policies: RolloutPolicyPair,
    scorer: Box<dyn TrajectoryScorer>,
    serial: Option<Mutex<()>>,
}

impl PolicyRollout {
    pub fn new(policies: RolloutPolicyPair, scorer: Box<dyn TrajectoryScorer>) -> Self {
        let safe = policies.agent_policy.concurrent_safe()
            && policies.partner_policy.concurrent_safe()
            && scorer.concurrent_safe();
        PolicyRollout {
            policies,
            scorer,
            serial: (!safe).then(|| Mutex::new(())),
        }
    }

    pub fn run(&self, request: &RolloutRequest<'_>) -> std::result::Result<Trajectory, OracleError> {
        let _guard = self.serial.as_ref().map(|m| m.lock().expect("policy lock poisoned"));
        self.run_unlocked(request)
    }

    fn run_unlocked(&self, request: &RolloutRequest<'_>) -> std::result::Result<Trajectory, OracleError> {
        let mut turns = request.history.to_vec();
        let history_len = turns.len();
        let mut speaker = match turns.last() {
            Some(t) if t.speaker == Speaker::Agent => Speaker::Partner,
            _ => Speaker::Agent,
        };
        for step in 0..self.policies.max_future_turns {
            let seed = rng::derive_seed(request.rollout_seed, &format!("turn-{step}"));
            let (policy, goal) = match speaker {
                Speaker::Agent => (&self.policies.agent_policy, request.agent_goal),
                Speaker::Partner => (&self.policies.partner_policy, request.partner_goal),
            };
            let next = policy
                .next_utterance(&turns, goal, seed)
                .map_err(|e| OracleError::new(request.coalition_mask, OracleErrorKind::Policy, e))?;
            let Some(text) = next else { break };
            turns.push(Turn {
                speaker,
                text,
                position: turns.len(),
            });
            speaker = match speaker {
                Speaker::Agent => Speaker::Partner,
                Speaker::Partner => Speaker::Agent,
            };
        }
        Ok(Trajectory {
            coalition_mask: request.coalition_mask,
            turns,
            history_len,
        })
    }
}

impl RolloutBackend for PolicyRollout {
    fn rollout(&self, request: &RolloutRequest<'_>) -> std::result::Result<DimensionScores, OracleError> {
        let _guard = self.serial.as_ref().map(|m| m.lock().expect("policy lock poisoned"));
        let trajectory = self.run_unlocked(request)?;
        self.scorer
            .score(&trajectory, request.rollout_seed)
            .map_err(|e| OracleError::new(request.coalition_mask, OracleErrorKind::Policy, e))
    }
}

/// Utilities of the `rollouts` individual trajectories for one coalition.
pub fn rollout_utilities(
    episode: &Episode,
    coalition: Coalition,
    backend: &dyn RolloutBackend,
    weights: &UtilityWeights,
    rollouts: u32,
    base_seed: u64,
) -> std::result::Result<Vec<f64>, OracleError> {
    let mask = coalition.mask();
    if rollouts == 0 {
        return Err(OracleError::new(mask, OracleErrorKind::Policy, "at least one rollout is required"));
    }
    let history = reconstruct_history(episode, coalition);
    let requests: Vec<RolloutRequest<'_>> = (0..rollouts)
        .map(|j| RolloutRequest {
            episode_id: &episode.episode_id,
            coalition_mask: mask,
            rollout_index: j,
            rollout_seed: rng::rollout_seed(base_seed, &episode.episode_id, mask, j),
            history: &history,
            agent_goal: &episode.agent_goal,
            partner_goal: &episode.partner_goal,
        })
        .collect();
    backend
        .rollouts(&requests)
        .into_iter()
        .map(|scores| {
            let scores = scores?;
            aggregate_utility(&scores, weights)
                .map_err(|e| OracleError::new(mask, OracleErrorKind::MalformedResponse, e.to_string()))
        })
        .collect()
}

/// Monte-Carlo estimate of v(S): mean utility over `rollouts` continuations
/// of H(S). Rollout `j` is seeded from (base_seed, episode_id, mask, j)
/// alone, so the value does not depend on evaluation order.
pub fn rollout_value(
    episode: &Episode,
    coalition: Coalition,
    backend: &dyn RolloutBackend,
    weights: &UtilityWeights,
    rollouts: u32,
    base_seed: u64,
) -> std::result::Result<ValueSample, OracleError> {
    let utilities = rollout_utilities(episode, coalition, backend, weights, rollouts, base_seed)?;
    Ok(ValueSample {
        coalition,
        value: utilities.iter().sum::<f64>() / utilities.len() as f64,
        num_rollouts_used: rollouts,
    })
}

/// An episode viewed as a cooperative game valued by rollouts.
pub struct EpisodeGame<'a> {
    pub episode: &'a Episode,
    pub backend: &'a dyn RolloutBackend,
    pub weights: &'a UtilityWeights,
    pub rollouts: u32,
    pub base_seed: u64,
}

impl ValueOracle for EpisodeGame<'_> {
    fn players(&self) -> PlayerSet {
        self.episode.players()
    }

    fn evaluate(&self, coalition: Coalition) -> std::result::Result<ValueSample, OracleError> {
        rollout_value(
            self.episode,
            coalition,
            self.backend,
            self.weights,
            self.rollouts,
            self.base_seed,
        )
    }
}

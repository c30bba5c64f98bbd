//! Closed-form simulated dialogue game.
//!
//! The value of a coalition is `Σ_{i∈S} b_i + Σ_{i<j∈S} Θ_ij + γ|S|`.
//! Rollouts add Gaussian noise with standard deviation σ drawn from the
//! rollout seed, so the expectation over rollouts is exactly that closed
//! form.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleError, Result};
use crate::game::{Coalition, PlayerSet, ValueOracle, ValueSample, MAX_PLAYERS};
use crate::rng;
use crate::rollout::{
    DimensionScores, Episode, Policy, PolicyRollout, RolloutPolicyPair, Speaker, Trajectory,
    TrajectoryScorer, Turn, UtilityWeights,
};
use crate::shapley::ShapleyVector;

/// Number of turns each simulated rollout adds before ending.
pub const SIM_ROLLOUT_TURNS: usize = 4;

const ROLLOUT_TAG: &str = "[rollout]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimGameSpec {
    pub n: usize,
    pub base_values: Vec<f64>,
    /// Symmetric with zero diagonal.
    pub synergy: Vec<Vec<f64>>,
    #[serde(default)]
    pub partner_response_gain: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Share of the utility attributed to each dimension; defaults to the
    /// utility weights themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension_split: Option<BTreeMap<String, f64>>,
}

/// Parameters for randomly generated unit-scale games.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomGameOptions {
    /// Off-diagonal synergies are uniform on `[-synergy_scale, synergy_scale]`.
    pub synergy_scale: f64,
    pub partner_response_gain: f64,
    pub noise_std: f64,
}

impl Default for RandomGameOptions {
    fn default() -> Self {
        RandomGameOptions {
            synergy_scale: 0.1,
            partner_response_gain: 0.0,
            noise_std: 0.0,
        }
    }
}

impl SimGameSpec {
    /// A game with base values uniform on `[0, 1)`.
    pub fn random(n: usize, seed: u64, options: RandomGameOptions) -> Result<Self> {
        PlayerSet::new(n)?;
        let mut rng = rng::seeded(seed);
        let base_values = (0..n).map(|_| rng::unit(&mut rng)).collect();
        let mut synergy = vec![vec![0.0; n]; n];
        #[allow(clippy::needless_range_loop)]
        for i in 0..n {
            for j in i + 1..n {
                let s = (2.0 * rng::unit(&mut rng) - 1.0) * options.synergy_scale;
                synergy[i][j] = s;
                synergy[j][i] = s;
            }
        }
        let spec = SimGameSpec {
            n,
            base_values,
            synergy,
            partner_response_gain: options.partner_response_gain,
            noise_std: options.noise_std,
            dimension_split: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > MAX_PLAYERS {
            return Err(Error::PlayerCount(self.n));
        }
        if self.base_values.len() != self.n || self.synergy.len() != self.n {
            return Err(Error::Config("sim game dimensions do not match n".into()));
        }
        for (i, row) in self.synergy.iter().enumerate() {
            if row.len() != self.n {
                return Err(Error::Config("synergy matrix must be n x n".into()));
            }
            if row[i] != 0.0 {
                return Err(Error::Config("synergy diagonal must be zero".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v != self.synergy[j][i] {
                    return Err(Error::Config("synergy matrix must be finite and symmetric".into()));
                }
            }
        }
        if self.base_values.iter().any(|b| !b.is_finite())
            || !self.partner_response_gain.is_finite()
            || !(self.noise_std >= 0.0 && self.noise_std.is_finite())
        {
            return Err(Error::Config("sim game parameters must be finite with noise_std >= 0".into()));
        }
        if let Some(split) = &self.dimension_split {
            if split.values().any(|v| !v.is_finite() || *v < 0.0) || split.values().sum::<f64>() <= 0.0 {
                return Err(Error::Config("dimension_split must be non-negative with a positive sum".into()));
            }
        }
        Ok(())
    }

    pub fn players(&self) -> PlayerSet {
        PlayerSet::new(self.n).expect("validated sim game")
    }

    /// Analytic Shapley values: `b_i + γ + ½ Σ_j Θ_ij`.
    pub fn analytic_shapley(&self) -> ShapleyVector {
        let values = (0..self.n)
            .map(|i| {
                self.base_values[i] + self.partner_response_gain + 0.5 * self.synergy[i].iter().sum::<f64>()
            })
            .collect();
        ShapleyVector {
            values,
            v_empty: 0.0,
            v_full: sim_expected_value(self, self.players().grand()),
        }
    }
}

/// `E[v(S)]` of the simulated game with rollout noise integrated out.
pub fn sim_expected_value(spec: &SimGameSpec, coalition: Coalition) -> f64 {
    let members: Vec<usize> = coalition.members().collect();
    let mut value: f64 = members.iter().map(|&i| spec.base_values[i]).sum();
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            value += spec.synergy[i][j];
        }
    }
    value + spec.partner_response_gain * coalition.size() as f64
}

/// The simulated game evaluated directly from its closed form.
pub struct SimValueOracle<'a>(pub &'a SimGameSpec);

impl ValueOracle for SimValueOracle<'_> {
    fn players(&self) -> PlayerSet {
        self.0.players()
    }

    fn evaluate(&self, coalition: Coalition) -> std::result::Result<ValueSample, OracleError> {
        Ok(ValueSample::exact(coalition, sim_expected_value(self.0, coalition)))
    }
}

/// Emits tagged filler utterances until [`SIM_ROLLOUT_TURNS`] continuation
/// turns exist.
struct SimPolicy {
    speaker: Speaker,
}

impl Policy for SimPolicy {
    fn next_utterance(&self, history: &[Turn], _goal: &str, seed: u64) -> std::result::Result<Option<String>, String> {
        let produced = history.iter().filter(|t| t.text.starts_with(ROLLOUT_TAG)).count();
        if produced >= SIM_ROLLOUT_TURNS {
            return Ok(None);
        }
        let who = match self.speaker {
            Speaker::Agent => "agent",
            Speaker::Partner => "partner",
        };
        Ok(Some(format!("{ROLLOUT_TAG} {who} move {produced} ({seed:016x})")))
    }
}

struct SimScorer {
    spec: SimGameSpec,
    split: BTreeMap<String, f64>,
}

impl TrajectoryScorer for SimScorer {
    fn score(&self, trajectory: &Trajectory, seed: u64) -> std::result::Result<DimensionScores, String> {
        let realized = Coalition::from_mask(trajectory.coalition_mask);
        let agent_turns = trajectory.turns[..trajectory.history_len]
            .iter()
            .filter(|t| t.speaker == Speaker::Agent)
            .count();
        if agent_turns != realized.size() {
            return Err(format!(
                "history holds {agent_turns} agent turns but coalition {:#x} has {}",
                realized.mask(),
                realized.size()
            ));
        }
        Ok(sim_scores(&self.spec, &self.split, realized, seed))
    }
}

/// Per-dimension scores of one simulated rollout. `split` maps each
/// dimension to `share_d / w_d`, so that `Σ w_d G_d` is the trajectory
/// utility.
fn sim_scores(spec: &SimGameSpec, split: &BTreeMap<String, f64>, coalition: Coalition, seed: u64) -> DimensionScores {
    let mut utility = sim_expected_value(spec, coalition);
    if spec.noise_std > 0.0 {
        let z: f64 = StandardNormal.sample(&mut rng::seeded(seed));
        utility += spec.noise_std * z;
    }
    DimensionScores(split.iter().map(|(k, f)| (k.clone(), f * utility)).collect())
}

fn score_multipliers(spec: &SimGameSpec, weights: &UtilityWeights) -> Result<BTreeMap<String, f64>> {
    weights.validate()?;
    let shares = spec.dimension_split.clone().unwrap_or_else(|| weights.0.clone());
    if shares.len() != weights.0.len() || shares.keys().any(|k| !weights.0.contains_key(k)) {
        return Err(Error::KeyMismatch("dimension_split keys must match utility weights".into()));
    }
    let total: f64 = shares.values().sum();
    shares
        .into_iter()
        .map(|(k, share)| {
            let w = weights.0[&k];
            if share > 0.0 && w == 0.0 {
                return Err(Error::Config(format!("dimension {k} has a share but zero weight")));
            }
            let m = if share == 0.0 { 0.0 } else { share / total / w };
            Ok((k, m))
        })
        .collect()
}

/// In-process rollout backend for a simulated game.
pub fn sim_rollout_backend(
    spec: &SimGameSpec,
    weights: &UtilityWeights,
    max_future_turns: usize,
) -> Result<PolicyRollout> {
    spec.validate()?;
    let split = score_multipliers(spec, weights)?;
    Ok(PolicyRollout::new(
        RolloutPolicyPair {
            agent_policy: Box::new(SimPolicy {
                speaker: Speaker::Agent,
            }),
            partner_policy: Box::new(SimPolicy {
                speaker: Speaker::Partner,
            }),
            max_future_turns,
        },
        Box::new(SimScorer {
            spec: spec.clone(),
            split,
        }),
    ))
}

/// The scores a conforming external harness replaying this game returns
/// for one wire request.
pub fn sim_wire_scores(
    spec: &SimGameSpec,
    weights: &UtilityWeights,
    coalition_mask: u64,
    rollout_seed: u64,
) -> Result<DimensionScores> {
    let split = score_multipliers(spec, weights)?;
    let coalition = spec.players().coalition(coalition_mask)?;
    Ok(sim_scores(spec, &split, coalition, rollout_seed))
}

/// A synthetic episode for a simulated game: an opening partner turn, then
/// alternating agent and partner turns, one agent turn per player.
pub fn sim_episode(spec: &SimGameSpec, episode_id: &str) -> Result<Episode> {
    spec.validate()?;
    let mut turns = vec![(Speaker::Partner, format!("[{episode_id}] partner opens"))];
    for i in 0..spec.n {
        turns.push((Speaker::Agent, format!("[a{i}] agent action {i}")));
        turns.push((Speaker::Partner, format!("partner reply {i}")));
    }
    Episode::new(
        episode_id,
        format!("simulated negotiation {episode_id}"),
        "reach a favourable agreement",
        "concede as little as possible",
        turns,
    )
}

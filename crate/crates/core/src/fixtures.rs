//! Reference games with known attributions.

use crate::game::TableGame;
use crate::oracle::sim::SimGameSpec;

/// Three-player game where player 1 joins with marginal contributions
/// 1.2 (after ∅), 0.8 (after {0}), 1.0 (after {2}) and 0.6 (after {0,2}),
/// giving φ₁ = 0.9. `v(∅) = 0`; `free` sets `v({0})`, `v({2})`, `v({0,2})`
/// and the remaining values follow from those marginals.
pub fn three_utterance_game(free: [f64; 3]) -> TableGame {
    let [v0, v2, v02] = free;
    let v1 = 1.2;
    let values = vec![
        0.0,       // ∅
        v0,        // {0}
        v1,        // {1}
        v0 + 0.8,  // {0,1}
        v2,        // {2}
        v02,       // {0,2}
        v2 + 1.0,  // {1,2}
        v02 + 0.6, // N
    ];
    TableGame::new(3, values).expect("fixture is a valid 3-player table")
}

/// The default completion: `v({0}) = 0.5`, `v({2}) = 0.7`, `v({0,2}) = 1.4`.
pub fn three_utterance_default() -> TableGame {
    three_utterance_game([0.5, 0.7, 1.4])
}

/// The same game as a simulated dialogue (γ = 0, σ = 0): base values are
/// the singleton values and synergies the pairwise interaction terms, which
/// reproduce the table exactly.
pub fn three_utterance_sim() -> SimGameSpec {
    SimGameSpec {
        n: 3,
        base_values: vec![0.5, 1.2, 0.7],
        synergy: vec![vec![0.0, -0.4, 0.2], vec![-0.4, 0.0, -0.2], vec![0.2, -0.2, 0.0]],
        partner_response_gain: 0.0,
        noise_std: 0.0,
        dimension_split: None,
    }
}

/// Four-utterance negotiation game with `v(∅) = 5.0`, `v({2}) = 7.5`,
/// `v({1}) = 6.8`, `v({0,1,3}) = 6.8`, `v(N) = 8.0`. The remaining values
/// are a completion chosen so that φ = (0.4, 0.8, 1.5, 0.3): the additive
/// game `5 + Σφ_i` shifted at {2}, {1}, {0,1,3}, {0}, {3} and {2,3}.
pub const NEGOTIATION_VALUES: [f64; 16] = [
    5.0, 6.4, 6.8, 6.2, 7.5, 6.9, 7.3, 7.7, 6.0, 5.7, 6.1, 6.8, 7.4, 7.2, 7.6, 8.0,
];

pub const NEGOTIATION_PHI: [f64; 4] = [0.4, 0.8, 1.5, 0.3];

pub const NEGOTIATION_NORMALIZED: [f64; 4] = [0.83, 4.17, 10.0, 0.0];

pub fn negotiation_game() -> TableGame {
    TableGame::new(4, NEGOTIATION_VALUES.to_vec()).expect("fixture is a valid 4-player table")
}

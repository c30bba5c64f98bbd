//! Value and policy backends: a closed-form simulated game and a client for
//! external rollout harnesses.

pub mod external;
pub mod mock;
pub mod sim;

pub use external::{external_value_oracle, ExternalOracle, ExternalOracleConfig, Transport};
pub use mock::{MockOptions, MockReply, MockServer};
pub use sim::{sim_episode, sim_expected_value, sim_rollout_backend, RandomGameOptions, SimGameSpec, SimValueOracle};

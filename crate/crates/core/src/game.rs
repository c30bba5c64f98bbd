//! Cooperative-game substrate: players, coalitions, the value-oracle
//! contract and a memoizing cache shared by every solver.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};

use once_cell::sync::OnceCell;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleError, Result};

/// Largest player count a single-word coalition mask can hold.
pub const MAX_PLAYERS: usize = 63;

/// Largest player count for which full `2^n` enumeration is allowed.
pub const MAX_ENUMERATION_PLAYERS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlayerSet {
    n: usize,
}

impl PlayerSet {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_PLAYERS {
            return Err(Error::PlayerCount(n));
        }
        Ok(PlayerSet { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn full_mask(&self) -> u64 {
        (1u64 << self.n) - 1
    }

    pub fn empty(&self) -> Coalition {
        Coalition::from_mask(0)
    }

    pub fn grand(&self) -> Coalition {
        Coalition::from_mask(self.full_mask())
    }

    pub fn singleton(&self, player: usize) -> Coalition {
        assert!(player < self.n, "player {player} out of range for n={}", self.n);
        Coalition::from_mask(1 << player)
    }

    /// Validates that `mask` only names players of this set.
    pub fn coalition(&self, mask: u64) -> Result<Coalition> {
        if mask & !self.full_mask() != 0 {
            return Err(Error::InvalidCoalition { mask, n: self.n });
        }
        Ok(Coalition::from_mask(mask))
    }

    pub fn contains(&self, coalition: Coalition) -> bool {
        coalition.mask & !self.full_mask() == 0
    }
}

/// A subset of players stored as a bitmask; bit `i` is player `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "u64", into = "u64")]
pub struct Coalition {
    mask: u64,
    size: u32,
}

impl From<u64> for Coalition {
    fn from(mask: u64) -> Self {
        Coalition::from_mask(mask)
    }
}

impl From<Coalition> for u64 {
    fn from(c: Coalition) -> u64 {
        c.mask
    }
}

impl Coalition {
    pub const EMPTY: Coalition = Coalition { mask: 0, size: 0 };

    pub fn from_mask(mask: u64) -> Self {
        Coalition {
            mask,
            size: mask.count_ones(),
        }
    }

    pub fn from_members(members: impl IntoIterator<Item = usize>) -> Self {
        let mask = members.into_iter().fold(0u64, |m, i| {
            assert!(i < MAX_PLAYERS, "player index {i} too large");
            m | (1 << i)
        });
        Coalition::from_mask(mask)
    }

    pub fn mask(&self) -> u64 {
        self.mask
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn is_empty(&self) -> bool {
        self.mask == 0
    }

    pub fn contains(&self, player: usize) -> bool {
        player < 64 && self.mask & (1 << player) != 0
    }

    pub fn with(&self, player: usize) -> Coalition {
        Coalition::from_mask(self.mask | (1 << player))
    }

    pub fn without(&self, player: usize) -> Coalition {
        Coalition::from_mask(self.mask & !(1 << player))
    }

    pub fn is_subset_of(&self, other: Coalition) -> bool {
        self.mask & !other.mask == 0
    }

    /// Member indices in ascending order.
    pub fn members(&self) -> impl Iterator<Item = usize> {
        let mut rest = self.mask;
        std::iter::from_fn(move || {
            if rest == 0 {
                return None;
            }
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(i)
        })
    }
}

/// A realized value estimate for one coalition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueSample {
    pub coalition: Coalition,
    pub value: f64,
    pub num_rollouts_used: u32,
}

impl ValueSample {
    pub fn exact(coalition: Coalition, value: f64) -> Self {
        ValueSample {
            coalition,
            value,
            num_rollouts_used: 0,
        }
    }
}

/// Maps a coalition to its strategic value. Implementations may be
/// stochastic, but must be reproducible for a fixed seed configuration.
pub trait ValueOracle: Sync {
    fn players(&self) -> PlayerSet;

    fn evaluate(&self, coalition: Coalition) -> std::result::Result<ValueSample, OracleError>;
}

impl<T: ValueOracle + ?Sized> ValueOracle for &T {
    fn players(&self) -> PlayerSet {
        (**self).players()
    }

    fn evaluate(&self, coalition: Coalition) -> std::result::Result<ValueSample, OracleError> {
        (**self).evaluate(coalition)
    }
}

/// A game given by a full table of `2^n` values indexed by mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGame {
    players: PlayerSet,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        let players = PlayerSet::new(n)?;
        if n > MAX_ENUMERATION_PLAYERS {
            return Err(Error::Budget {
                n,
                max: MAX_ENUMERATION_PLAYERS,
            });
        }
        if values.len() != 1 << n {
            return Err(Error::Domain(format!(
                "table game needs {} values, got {}",
                1usize << n,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("table value {v}")));
        }
        Ok(TableGame { players, values })
    }

    /// Tabulates any oracle; the oracle is called once per coalition.
    pub fn tabulate(oracle: &dyn ValueOracle) -> Result<Self> {
        let n = oracle.players().len();
        let values = all_coalitions(n)?
            .into_iter()
            .map(|c| oracle.evaluate(c).map(|s| s.value))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        TableGame::new(n, values)
    }

    pub fn value(&self, coalition: Coalition) -> f64 {
        self.values[coalition.mask() as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl ValueOracle for TableGame {
    fn players(&self) -> PlayerSet {
        self.players
    }

    fn evaluate(&self, coalition: Coalition) -> std::result::Result<ValueSample, OracleError> {
        Ok(ValueSample::exact(coalition, self.value(coalition)))
    }
}

/// Adapts a closure `Coalition -> f64` into a deterministic oracle.
pub struct FnGame<F> {
    players: PlayerSet,
    f: F,
}

impl<F: Fn(Coalition) -> f64 + Sync> FnGame<F> {
    pub fn new(n: usize, f: F) -> Result<Self> {
        Ok(FnGame {
            players: PlayerSet::new(n)?,
            f,
        })
    }
}

impl<F: Fn(Coalition) -> f64 + Sync> ValueOracle for FnGame<F> {
    fn players(&self) -> PlayerSet {
        self.players
    }

    fn evaluate(&self, coalition: Coalition) -> std::result::Result<ValueSample, OracleError> {
        Ok(ValueSample::exact(coalition, (self.f)(coalition)))
    }
}

/// Every coalition of an `n`-player game in ascending mask order.
pub fn all_coalitions(n: usize) -> Result<Vec<Coalition>> {
    if n > MAX_ENUMERATION_PLAYERS {
        return Err(Error::Budget {
            n,
            max: MAX_ENUMERATION_PLAYERS,
        });
    }
    Ok((0..1u64 << n).map(Coalition::from_mask).collect())
}

/// Memoized coalition values. The first realized value for a mask is kept
/// for the lifetime of the cache; concurrent misses on the same mask result
/// in exactly one oracle call.
#[derive(Debug, Default)]
pub struct ValueCache {
    entries: RwLock<HashMap<u64, Arc<OnceCell<ValueSample>>>>,
    oracle_calls: AtomicUsize,
}

impl ValueCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, mask: u64) -> Option<ValueSample> {
        let entries = self.entries.read().expect("cache lock poisoned");
        entries.get(&mask).and_then(|cell| cell.get().copied())
    }

    /// Number of masks holding a stored value.
    pub fn len(&self) -> usize {
        let entries = self.entries.read().expect("cache lock poisoned");
        entries.values().filter(|c| c.get().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of times an oracle was actually invoked through this cache.
    pub fn oracle_calls(&self) -> usize {
        self.oracle_calls.load(Ordering::SeqCst)
    }

    /// All stored samples in ascending mask order.
    pub fn samples(&self) -> Vec<ValueSample> {
        let entries = self.entries.read().expect("cache lock poisoned");
        let mut out: Vec<ValueSample> = entries.values().filter_map(|c| c.get().copied()).collect();
        out.sort_by_key(|s| s.coalition.mask());
        out
    }

    pub fn evaluate_cached(&self, oracle: &dyn ValueOracle, coalition: Coalition) -> Result<f64> {
        let players = oracle.players();
        if !players.contains(coalition) {
            return Err(Error::InvalidCoalition {
                mask: coalition.mask(),
                n: players.len(),
            });
        }
        let cell = self.cell(coalition.mask());
        let sample = cell.get_or_try_init(|| {
            self.oracle_calls.fetch_add(1, Ordering::SeqCst);
            let sample = oracle.evaluate(coalition)?;
            if !sample.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "oracle returned {} for mask {:#x}",
                    sample.value,
                    coalition.mask()
                )));
            }
            Ok::<_, Error>(ValueSample {
                coalition,
                ..sample
            })
        })?;
        Ok(sample.value)
    }

    /// Populates the cache for every coalition in `coalitions`, using up to
    /// `jobs` worker threads. On failure, reports every mask still missing.
    pub fn evaluate_batch(
        &self,
        oracle: &dyn ValueOracle,
        coalitions: &[Coalition],
        jobs: usize,
    ) -> Result<()> {
        let run = || -> Vec<(u64, Error)> {
            if jobs <= 1 {
                coalitions
                    .iter()
                    .filter_map(|&c| self.evaluate_cached(oracle, c).err().map(|e| (c.mask(), e)))
                    .collect()
            } else {
                coalitions
                    .par_iter()
                    .filter_map(|&c| self.evaluate_cached(oracle, c).err().map(|e| (c.mask(), e)))
                    .collect()
            }
        };
        let mut failures = if jobs <= 1 {
            run()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?
                .install(run)
        };
        if failures.is_empty() {
            return Ok(());
        }
        failures.sort_by_key(|(mask, _)| *mask);
        let mut unevaluated: Vec<u64> = coalitions
            .iter()
            .map(|c| c.mask())
            .filter(|&m| self.get(m).is_none())
            .collect();
        unevaluated.sort_unstable();
        unevaluated.dedup();
        let (_, first) = failures.swap_remove(0);
        match first {
            Error::Oracle(source) => Err(Error::Backend {
                unevaluated,
                source,
            }),
            Error::Backend { source, .. } => Err(Error::Backend {
                unevaluated,
                source,
            }),
            other => Err(other),
        }
    }

    fn cell(&self, mask: u64) -> Arc<OnceCell<ValueSample>> {
        if let Some(cell) = self.entries.read().expect("cache lock poisoned").get(&mask) {
            return Arc::clone(cell);
        }
        let mut entries = self.entries.write().expect("cache lock poisoned");
        Arc::clone(entries.entry(mask).or_default())
    }
}

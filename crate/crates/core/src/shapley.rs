//! Ground-truth Shapley solvers: exact subset summation and permutation
//! averaging (sampled or exhaustive).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Coalition, ValueCache, ValueOracle, MAX_ENUMERATION_PLAYERS};
use crate::rng;

/// Largest game for which every ordering may be enumerated.
pub const MAX_PERMUTATION_ENUMERATION: usize = 10;

/// Per-player attributions together with the baselines they distribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyVector {
    pub values: Vec<f64>,
    pub v_empty: f64,
    pub v_full: f64,
}

impl ShapleyVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// `Σφ − (v(N) − v(∅))`; zero for an efficient attribution.
    pub fn efficiency_gap(&self) -> f64 {
        self.sum() - (self.v_full - self.v_empty)
    }

    /// Index of the largest value; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_abs_diff(&self, other: &ShapleyVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `|S|!(n−|S|−1)!/n!` for `|S| = 0..n`, i.e. `1 / (n · C(n−1, |S|))`.
fn shapley_coefficients(n: usize) -> Vec<f64> {
    let mut binom = 1u64;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        out.push(1.0 / (n as f64 * binom as f64));
        // C(n−1, s+1) = C(n−1, s) · (n−1−s) / (s+1), exact in u64 for n ≤ 20
        binom = binom * (n - 1 - s) as u64 / (s + 1) as u64;
    }
    out
}

/// Exact Shapley values by a single pass over all `2^n` coalitions; each
/// `v(S)` is scattered into the marginal terms it takes part in.
pub fn exact_shapley(oracle: &dyn ValueOracle, cache: &ValueCache) -> Result<ShapleyVector> {
    let players = oracle.players();
    let n = players.len();
    if n > MAX_ENUMERATION_PLAYERS {
        return Err(Error::Budget {
            n,
            max: MAX_ENUMERATION_PLAYERS,
        });
    }
    let coeff = shapley_coefficients(n);
    let mut phi = vec![0.0; n];
    for mask in 0..=players.full_mask() {
        let coalition = Coalition::from_mask(mask);
        let v = cache.evaluate_cached(oracle, coalition)?;
        let size = coalition.size();
        for (i, p) in phi.iter_mut().enumerate() {
            if coalition.contains(i) {
                // S = T ∪ {i} with |T| = size − 1
                *p += coeff[size - 1] * v;
            } else {
                *p -= coeff[size] * v;
            }
        }
    }
    Ok(ShapleyVector {
        values: phi,
        v_empty: cache.evaluate_cached(oracle, Coalition::EMPTY)?,
        v_full: cache.evaluate_cached(oracle, players.grand())?,
    })
}

/// `num_permutations` uniform orderings of `0..n`. Each is an identity
/// vector shuffled by the documented Fisher-Yates stream of `seed`.
pub fn sample_permutations(n: usize, num_permutations: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::seeded(seed);
    (0..num_permutations)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            rng::shuffle(&mut rng, &mut order);
            order
        })
        .collect()
}

/// All `n!` orderings in lexicographic order.
pub fn all_permutations(n: usize) -> Result<Vec<Vec<usize>>> {
    if n > MAX_PERMUTATION_ENUMERATION {
        return Err(Error::Budget {
            n,
            max: MAX_PERMUTATION_ENUMERATION,
        });
    }
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(k) = (1..n).rev().find(|&k| current[k - 1] < current[k]) else {
            return Ok(out);
        };
        let pivot = k - 1;
        let swap_with = (k..n).rev().find(|&j| current[j] > current[pivot]).expect("successor exists");
        current.swap(pivot, swap_with);
        current[k..].reverse();
        out.push(current.clone());
    }
}

/// Every prefix coalition visited by the given orderings, deduplicated and
/// in ascending mask order.
pub fn prefix_coalitions(orders: &[Vec<usize>]) -> Vec<Coalition> {
    let mut masks: Vec<u64> = orders
        .iter()
        .flat_map(|order| {
            order.iter().scan(0u64, |acc, &p| {
                *acc |= 1 << p;
                Some(*acc)
            })
        })
        .chain(std::iter::once(0))
        .collect();
    masks.sort_unstable();
    masks.dedup();
    masks.into_iter().map(Coalition::from_mask).collect()
}

/// Mean marginal contribution of each player over the given orderings.
pub fn permutation_average(
    oracle: &dyn ValueOracle,
    cache: &ValueCache,
    orders: &[Vec<usize>],
) -> Result<ShapleyVector> {
    let players = oracle.players();
    let n = players.len();
    if orders.is_empty() {
        return Err(Error::Domain("at least one permutation is required".into()));
    }
    let v_empty = cache.evaluate_cached(oracle, Coalition::EMPTY)?;
    let mut totals = vec![0.0; n];
    for order in orders {
        if order.len() != n {
            return Err(Error::Domain(format!(
                "ordering has {} players, game has {n}",
                order.len()
            )));
        }
        let mut prefix = Coalition::EMPTY;
        let mut before = v_empty;
        for &player in order {
            prefix = prefix.with(player);
            let after = cache.evaluate_cached(oracle, prefix)?;
            totals[player] += after - before;
            before = after;
        }
    }
    let count = orders.len() as f64;
    Ok(ShapleyVector {
        values: totals.into_iter().map(|t| t / count).collect(),
        v_empty,
        v_full: cache.evaluate_cached(oracle, players.grand())?,
    })
}

/// Unbiased Monte-Carlo Shapley estimate from sampled orderings.
pub fn permutation_shapley(
    oracle: &dyn ValueOracle,
    cache: &ValueCache,
    num_permutations: usize,
    seed: u64,
) -> Result<ShapleyVector> {
    if num_permutations == 0 {
        return Err(Error::Domain("num_permutations must be at least 1".into()));
    }
    let orders = sample_permutations(oracle.players().len(), num_permutations, seed);
    permutation_average(oracle, cache, &orders)
}

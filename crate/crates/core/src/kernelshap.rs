//! KernelSHAP: kernel weights, extreme-size coalition sampling and the
//! efficiency-constrained weighted least-squares solve.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Coalition, PlayerSet, ValueCache, ValueOracle, MAX_PLAYERS};
use crate::rng;
use crate::shapley::ShapleyVector;

/// Hard cap on the number of distinct coalitions in a sampling plan.
pub const MAX_BUDGET: usize = 200;

/// Ridge added to the normal equations when they are numerically singular.
pub const RIDGE: f64 = 1e-10;

/// Relative pivot size below which the normal equations count as singular.
const SINGULAR_PIVOT: f64 = 1e-13;

/// Squared pivot ratio above which a condition warning is raised.
const CONDITION_WARN: f64 = 1e10;

/// Exact binomial coefficient; fits u128 for every `n ≤ 63`.
fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// SHAP kernel weight `(n−1) / (C(n,s) · s · (n−s))` for `1 ≤ s ≤ n−1`.
/// The denominator is formed exactly in integers, so the only rounding is
/// the final division.
pub fn shap_kernel_weight(n: usize, s: usize) -> Result<f64> {
    if !(2..=MAX_PLAYERS).contains(&n) {
        return Err(Error::Domain(format!("kernel weight needs 2 <= n <= 63, got n={n}")));
    }
    if s == 0 || s >= n {
        return Err(Error::Domain(format!(
            "kernel weight is infinite at coalition size {s} of {n}"
        )));
    }
    let denom = binomial(n, s) * (s * (n - s)) as u128;
    Ok((n - 1) as f64 / denom as f64)
}

/// `min(12n + 2, 200)`.
pub fn coalition_budget(n: usize) -> usize {
    (12 * n + 2).min(MAX_BUDGET)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub coalition: Coalition,
    /// How many times the sampler produced this mask (mandatory entries
    /// start at 1).
    pub multiplicity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub n: usize,
    pub budget_k: usize,
    pub seed: u64,
    /// True when `2^n ≤ budget_k` and the plan enumerates every coalition.
    pub exhaustive: bool,
    /// ∅, N, every singleton and every `(n−1)`-subset, deduplicated.
    pub mandatory: Vec<PlanEntry>,
    pub sampled: Vec<PlanEntry>,
    /// Number of random draws made after the mandatory set.
    pub draws: usize,
}

impl SamplingPlan {
    pub fn entries(&self) -> impl Iterator<Item = &PlanEntry> {
        self.mandatory.iter().chain(&self.sampled)
    }

    /// Distinct coalitions in the plan.
    pub fn len(&self) -> usize {
        self.mandatory.len() + self.sampled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coalitions(&self) -> Vec<Coalition> {
        self.entries().map(|e| e.coalition).collect()
    }
}

fn mandatory_coalitions(players: PlayerSet) -> Vec<Coalition> {
    let n = players.len();
    let full = players.full_mask();
    let mut seen = std::collections::HashSet::new();
    std::iter::once(0)
        .chain(std::iter::once(full))
        .chain((0..n).map(|i| 1u64 << i))
        .chain((0..n).map(|i| full & !(1u64 << i)))
        .filter(|m| seen.insert(*m))
        .map(Coalition::from_mask)
        .collect()
}

/// Draws a size in `1..n` with probability proportional to the total kernel
/// mass of that size class, `(n−1)/(s(n−s))`.
fn draw_size(rng: &mut rng::SeededRng, n: usize) -> usize {
    let mass = |s: usize| 1.0 / (s * (n - s)) as f64;
    let total: f64 = (1..n).map(mass).sum();
    let target = rng::unit(rng) * total;
    let mut acc = 0.0;
    for s in 1..n - 1 {
        acc += mass(s);
        if target < acc {
            return s;
        }
    }
    n - 1
}

/// Uniform coalition of exactly `size` players (partial Fisher-Yates).
fn draw_coalition(rng: &mut rng::SeededRng, n: usize, size: usize) -> Coalition {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = i + rng::below(rng, (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    Coalition::from_members(idx[..size].iter().copied())
}

/// Builds the coalition plan for an `n`-player game: the mandatory extreme
/// coalitions, then up to `10n` draws weighted toward extreme sizes. Games
/// small enough to enumerate inside the budget are enumerated instead.
pub fn build_sampling_plan(n: usize, seed: u64) -> Result<SamplingPlan> {
    let players = PlayerSet::new(n)?;
    let budget_k = coalition_budget(n);
    let mandatory: Vec<PlanEntry> = mandatory_coalitions(players)
        .into_iter()
        .map(|coalition| PlanEntry {
            coalition,
            multiplicity: 1,
        })
        .collect();

    if n < 63 && (1u64 << n) <= budget_k as u64 {
        let in_mandatory: std::collections::HashSet<u64> =
            mandatory.iter().map(|e| e.coalition.mask()).collect();
        let sampled = (0..=players.full_mask())
            .filter(|m| !in_mandatory.contains(m))
            .map(|m| PlanEntry {
                coalition: Coalition::from_mask(m),
                multiplicity: 1,
            })
            .collect();
        return Ok(SamplingPlan {
            n,
            budget_k,
            seed,
            exhaustive: true,
            mandatory,
            sampled,
            draws: 0,
        });
    }

    let draws = (10 * n).min(budget_k - mandatory.len());
    let mut rng = rng::seeded(seed);
    let mut index: HashMap<u64, (bool, usize)> = mandatory
        .iter()
        .enumerate()
        .map(|(i, e)| (e.coalition.mask(), (true, i)))
        .collect();
    let mut mandatory = mandatory;
    let mut sampled: Vec<PlanEntry> = Vec::new();
    for _ in 0..draws {
        let size = draw_size(&mut rng, n);
        let coalition = draw_coalition(&mut rng, n, size);
        match index.get(&coalition.mask()) {
            Some(&(true, i)) => mandatory[i].multiplicity += 1,
            Some(&(false, i)) => sampled[i].multiplicity += 1,
            None => {
                index.insert(coalition.mask(), (false, sampled.len()));
                sampled.push(PlanEntry {
                    coalition,
                    multiplicity: 1,
                });
            }
        }
    }
    Ok(SamplingPlan {
        n,
        budget_k,
        seed,
        exhaustive: false,
        mandatory,
        sampled,
        draws,
    })
}

/// One regression row: an interior coalition, its kernel weight and value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedCoalitionSample {
    pub coalition: Coalition,
    pub kernel_weight: f64,
    pub value: f64,
    pub multiplicity: u32,
}

impl WeightedCoalitionSample {
    pub fn new(n: usize, coalition: Coalition, value: f64, multiplicity: u32) -> Result<Self> {
        Ok(WeightedCoalitionSample {
            coalition,
            kernel_weight: shap_kernel_weight(n, coalition.size())?,
            value,
            multiplicity,
        })
    }

    fn effective_weight(&self) -> f64 {
        self.kernel_weight * f64::from(self.multiplicity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionDiagnostics {
    pub num_rows: usize,
    pub weighted_residual_sum_of_squares: f64,
    pub condition_warning: bool,
    pub ridge_applied: bool,
}

/// In-place Cholesky factorization of a symmetric matrix (row-major, lower
/// triangle used). Returns the pivots, or `None` if a pivot falls below
/// `tol`.
fn cholesky(a: &mut [f64], m: usize, tol: f64) -> Option<Vec<f64>> {
    let mut pivots = Vec::with_capacity(m);
    for j in 0..m {
        let mut d = a[j * m + j];
        for k in 0..j {
            d -= a[j * m + k] * a[j * m + k];
        }
        if d.is_nan() || d <= tol {
            return None;
        }
        let l = d.sqrt();
        a[j * m + j] = l;
        pivots.push(l);
        for i in j + 1..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = s / l;
        }
    }
    Some(pivots)
}

fn cholesky_solve(l: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..m {
        for k in 0..i {
            y[i] -= l[i * m + k] * y[k];
        }
        y[i] /= l[i * m + i];
    }
    for i in (0..m).rev() {
        for k in i + 1..m {
            y[i] -= l[k * m + i] * y[k];
        }
        y[i] /= l[i * m + i];
    }
    y
}

/// Numerical rank of a set of row vectors (Gaussian elimination with
/// partial pivoting).
fn row_rank(rows: &[Vec<f64>], m: usize) -> usize {
    let mut mat: Vec<Vec<f64>> = rows.to_vec();
    let mut rank = 0;
    for col in 0..m {
        let Some(pivot) = (rank..mat.len())
            .max_by(|&a, &b| mat[a][col].abs().total_cmp(&mat[b][col].abs()))
            .filter(|&p| mat[p][col].abs() > 1e-9)
        else {
            continue;
        };
        mat.swap(rank, pivot);
        let (done, rest) = mat.split_at_mut(rank + 1);
        let pivot_row = &done[rank];
        for row in rest {
            let f = row[col] / pivot_row[col];
            if f != 0.0 {
                for (x, p) in row[col..m].iter_mut().zip(&pivot_row[col..m]) {
                    *x -= f * p;
                }
            }
        }
        rank += 1;
    }
    rank
}

/// Weighted least squares for Shapley values with the intercept pinned to
/// `v_empty` and `Σφ = v_full − v_empty` enforced exactly. The last player
/// is eliminated through the sum constraint, the reduced normal equations
/// are solved by Cholesky, and the last coordinate is recovered.
pub fn solve_kernelshap(
    rows: &[WeightedCoalitionSample],
    v_empty: f64,
    v_full: f64,
    n: usize,
) -> Result<(ShapleyVector, RegressionDiagnostics)> {
    let players = PlayerSet::new(n)?;
    if !v_empty.is_finite() || !v_full.is_finite() {
        return Err(Error::NonFinite("regression baselines".into()));
    }
    let surplus = v_full - v_empty;
    if n == 1 {
        if !rows.is_empty() {
            return Err(Error::Domain("a one-player game has no interior coalitions".into()));
        }
        let phi = ShapleyVector {
            values: vec![surplus],
            v_empty,
            v_full,
        };
        let diagnostics = RegressionDiagnostics {
            num_rows: 0,
            weighted_residual_sum_of_squares: 0.0,
            condition_warning: false,
            ridge_applied: false,
        };
        return Ok((phi, diagnostics));
    }
    if rows.is_empty() {
        return Err(Error::RankDeficient {
            independent_rows: 0,
            required: n - 1,
        });
    }
    for row in rows {
        let size = row.coalition.size();
        if !players.contains(row.coalition) || size == 0 || size >= n {
            return Err(Error::Domain(format!(
                "row mask {:#x} is not an interior coalition of {n} players",
                row.coalition.mask()
            )));
        }
        if !row.value.is_finite() || !row.kernel_weight.is_finite() || row.kernel_weight < 0.0 {
            return Err(Error::NonFinite(format!("row mask {:#x}", row.coalition.mask())));
        }
        if row.multiplicity == 0 {
            return Err(Error::Domain(format!("row mask {:#x} has multiplicity 0", row.coalition.mask())));
        }
    }

    let m = n - 1;
    let last = n - 1;
    let reduced: Vec<(Vec<f64>, f64, f64)> = rows
        .iter()
        .map(|row| {
            let z_last = if row.coalition.contains(last) { 1.0 } else { 0.0 };
            let x: Vec<f64> = (0..m)
                .map(|i| if row.coalition.contains(i) { 1.0 } else { 0.0 } - z_last)
                .collect();
            let target = row.value - v_empty - z_last * surplus;
            (x, target, row.effective_weight())
        })
        .collect();

    let mut normal = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for (x, t, w) in &reduced {
        for i in 0..m {
            if x[i] == 0.0 {
                continue;
            }
            let wx = w * x[i];
            rhs[i] += wx * t;
            for j in 0..=i {
                normal[i * m + j] += wx * x[j];
            }
        }
    }
    for i in 0..m {
        for j in 0..i {
            normal[j * m + i] = normal[i * m + j];
        }
    }
    let scale = (0..m).map(|i| normal[i * m + i]).fold(0.0, f64::max);
    let tol = SINGULAR_PIVOT * scale.max(f64::MIN_POSITIVE);

    let mut factor = normal.clone();
    let mut ridge_applied = false;
    let pivots = match cholesky(&mut factor, m, tol) {
        Some(p) => p,
        None => {
            let weighted: Vec<Vec<f64>> = reduced
                .iter()
                .filter(|(_, _, w)| *w > 0.0)
                .map(|(x, _, _)| x.clone())
                .collect();
            let independent_rows = row_rank(&weighted, m);
            if independent_rows < m {
                return Err(Error::RankDeficient {
                    independent_rows,
                    required: m,
                });
            }
            factor = normal;
            for i in 0..m {
                factor[i * m + i] += RIDGE;
            }
            ridge_applied = true;
            cholesky(&mut factor, m, 0.0).ok_or(Error::RankDeficient {
                independent_rows,
                required: m,
            })?
        }
    };
    let max_pivot = pivots.iter().cloned().fold(0.0, f64::max);
    let min_pivot = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition_warning = (max_pivot / min_pivot).powi(2) > CONDITION_WARN;

    let mut values = cholesky_solve(&factor, m, &rhs);
    let reduced_sum: f64 = values.iter().sum();
    values.push(surplus - reduced_sum);

    let weighted_residual_sum_of_squares = rows
        .iter()
        .map(|row| {
            let fit: f64 = row.coalition.members().map(|i| values[i]).sum();
            let r = row.value - v_empty - fit;
            row.effective_weight() * r * r
        })
        .sum();

    Ok((
        ShapleyVector {
            values,
            v_empty,
            v_full,
        },
        RegressionDiagnostics {
            num_rows: rows.len(),
            weighted_residual_sum_of_squares,
            condition_warning,
            ridge_applied,
        },
    ))
}

/// Regression rows for every interior coalition of the plan, valued
/// through the cache.
pub fn plan_rows(
    oracle: &dyn ValueOracle,
    cache: &ValueCache,
    plan: &SamplingPlan,
) -> Result<Vec<WeightedCoalitionSample>> {
    plan.entries()
        .filter(|e| e.coalition.size() > 0 && e.coalition.size() < plan.n)
        .map(|e| {
            let value = cache.evaluate_cached(oracle, e.coalition)?;
            WeightedCoalitionSample::new(plan.n, e.coalition, value, e.multiplicity)
        })
        .collect()
}

/// KernelSHAP over a sampling plan.
pub fn kernelshap(
    oracle: &dyn ValueOracle,
    cache: &ValueCache,
    plan: &SamplingPlan,
) -> Result<(ShapleyVector, RegressionDiagnostics)> {
    let players = oracle.players();
    if players.len() != plan.n {
        return Err(Error::Domain(format!(
            "plan is for {} players, game has {}",
            plan.n,
            players.len()
        )));
    }
    let rows = plan_rows(oracle, cache, plan)?;
    let v_empty = cache.evaluate_cached(oracle, Coalition::EMPTY)?;
    let v_full = cache.evaluate_cached(oracle, players.grand())?;
    solve_kernelshap(&rows, v_empty, v_full, plan.n)
}

/// Rows for every interior coalition of an enumerable game.
pub fn exhaustive_rows(
    oracle: &dyn ValueOracle,
    cache: &ValueCache,
) -> Result<Vec<WeightedCoalitionSample>> {
    let n = oracle.players().len();
    crate::game::all_coalitions(n)?
        .into_iter()
        .filter(|c| c.size() > 0 && c.size() < n)
        .map(|c| {
            let value = cache.evaluate_cached(oracle, c)?;
            WeightedCoalitionSample::new(n, c, value, 1)
        })
        .collect()
}

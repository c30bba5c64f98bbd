//! Self-check battery: worked examples, kernel-weight law, solver
//! equivalence, Shapley axioms and estimator behaviour. Used by the
//! `validate` command so installed binaries can verify themselves.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fixtures;
use crate::game::{all_coalitions, Coalition, TableGame, ValueCache, ValueOracle};
use crate::kernelshap::{
    build_sampling_plan, exhaustive_rows, kernelshap, shap_kernel_weight, solve_kernelshap, WeightedCoalitionSample,
};
use crate::oracle::sim::{sim_episode, sim_expected_value, sim_rollout_backend, RandomGameOptions, SimGameSpec, SimValueOracle};
use crate::pipeline::normalize_rewards;
use crate::rng;
use crate::rollout::{EpisodeGame, UtilityWeights};
use crate::shapley::{exact_shapley, permutation_shapley, ShapleyVector};

/// Deliberate defects used to confirm the battery catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Doubles the kernel weight of every size-1 regression row.
    KernelWeight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateOptions {
    pub n_min: usize,
    pub n_max: usize,
    pub seeds: u64,
    pub base_seed: u64,
    pub fault: Option<Fault>,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            n_min: 2,
            n_max: 10,
            seeds: 50,
            base_seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Headline value of the check.
    pub value: String,
    /// Worst measured error (or the statistic compared against `tolerance`).
    pub measured: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} = {} ({}) measured={:.3e} tolerance={:.3e} {}",
            self.name,
            self.value,
            if self.passed { "pass" } else { "FAIL" },
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn check(name: &str, value: String, measured: f64, tolerance: f64, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        value,
        measured,
        tolerance,
        detail,
    }
}

fn within(name: &str, value: String, measured: f64, tolerance: f64, detail: String) -> CheckResult {
    check(name, value, measured, tolerance, measured <= tolerance, detail)
}

/// A game with i.i.d. uniform `[0, 1)` coalition values.
pub fn random_table_game(n: usize, seed: u64) -> TableGame {
    let mut r = rng::seeded(seed);
    TableGame::new(n, (0..1u64 << n).map(|_| rng::unit(&mut r)).collect()).expect("valid table size")
}

/// Random game in which players `i` and `j` are interchangeable.
pub fn symmetric_pair_game(n: usize, i: usize, j: usize, seed: u64) -> TableGame {
    let base = random_table_game(n, seed);
    let values = (0..1u64 << n)
        .map(|m| {
            let c = Coalition::from_mask(m);
            // canonical representative: if only j is present, use i instead
            let canon = if c.contains(j) && !c.contains(i) { c.without(j).with(i) } else { c };
            base.value(canon)
        })
        .collect();
    TableGame::new(n, values).expect("valid table size")
}

/// Random game in which `player` never changes any coalition's value.
pub fn null_player_game(n: usize, player: usize, seed: u64) -> TableGame {
    let base = random_table_game(n, seed);
    let values = (0..1u64 << n)
        .map(|m| base.value(Coalition::from_mask(m).without(player)))
        .collect();
    TableGame::new(n, values).expect("valid table size")
}

fn apply_fault(rows: &mut [WeightedCoalitionSample], fault: Option<Fault>) {
    if fault == Some(Fault::KernelWeight) {
        for row in rows.iter_mut().filter(|r| r.coalition.size() == 1) {
            row.kernel_weight *= 2.0;
        }
    }
}

/// Exhaustive KernelSHAP on a tabulated game, with an optional fault.
pub fn exhaustive_kernelshap(game: &TableGame, fault: Option<Fault>) -> Result<ShapleyVector> {
    let cache = ValueCache::new();
    let n = game.players().len();
    let v_empty = game.value(Coalition::EMPTY);
    let v_full = game.value(game.players().grand());
    if n == 1 {
        return Ok(solve_kernelshap(&[], v_empty, v_full, 1)?.0);
    }
    let mut rows = exhaustive_rows(game, &cache)?;
    apply_fault(&mut rows, fault);
    Ok(solve_kernelshap(&rows, v_empty, v_full, n)?.0)
}

fn exact(game: &dyn ValueOracle) -> Result<ShapleyVector> {
    exact_shapley(game, &ValueCache::new())
}

fn fmt_value(x: f64) -> String {
    format!("{}", (x * 1e9).round() / 1e9)
}

fn three_utterance_check(options: &ValidateOptions) -> Result<CheckResult> {
    let phi = exact(&fixtures::three_utterance_default())?.values[1];
    let mut worst = (phi - 0.9).abs();
    let mut r = rng::seeded(rng::derive_seed(options.base_seed, "three-utterance"));
    for _ in 0..10 {
        let free = [rng::unit(&mut r) * 3.0, rng::unit(&mut r) * 3.0, rng::unit(&mut r) * 3.0];
        let p = exact(&fixtures::three_utterance_game(free))?.values[1];
        worst = worst.max((p - 0.9).abs());
    }
    Ok(within(
        "appendix_a_phi_a2",
        fmt_value(phi),
        worst,
        1e-9,
        "exact solver, default completion plus 10 perturbations of the free values".into(),
    ))
}

fn negotiation_checks(options: &ValidateOptions) -> Result<Vec<CheckResult>> {
    let normalized = normalize_rewards(&fixtures::NEGOTIATION_PHI)?;
    let err = normalized
        .iter()
        .zip(fixtures::NEGOTIATION_NORMALIZED)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let shown: Vec<String> = normalized.iter().map(|v| format!("{v:.2}")).collect();
    let norm = within(
        "normalization_fixture",
        format!("({})", shown.join(", ")),
        err,
        0.005,
        "min-max scaling of (0.4, 0.8, 1.5, 0.3)".into(),
    );
    let phi = exhaustive_kernelshap(&fixtures::negotiation_game(), options.fault)?;
    let err = phi
        .values
        .iter()
        .zip(fixtures::NEGOTIATION_PHI)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let shown: Vec<String> = phi.values.iter().map(|v| format!("{v:.4}")).collect();
    let ks = within(
        "negotiation_kernelshap",
        format!("({})", shown.join(", ")),
        err,
        1e-9,
        "exhaustive KernelSHAP on the completed four-utterance game".into(),
    );
    Ok(vec![norm, ks])
}

/// `(n−1) / (C(n,s)·s·(n−s))` with the denominator built from Pascal's
/// triangle in u128.
pub fn rational_kernel_weight(pascal: &[Vec<u128>], n: usize, s: usize) -> f64 {
    let denom = pascal[n][s] * (s as u128) * ((n - s) as u128);
    (n - 1) as f64 / denom as f64
}

pub fn pascal_triangle(max_n: usize) -> Vec<Vec<u128>> {
    let mut rows: Vec<Vec<u128>> = vec![vec![1]];
    for n in 1..=max_n {
        let prev = &rows[n - 1];
        let mut row = vec![1u128; n + 1];
        for k in 1..n {
            row[k] = prev[k - 1] + prev[k];
        }
        rows.push(row);
    }
    rows
}

fn kernel_weight_law() -> Result<CheckResult> {
    let pascal = pascal_triangle(63);
    let mut worst_rel: f64 = 0.0;
    let mut symmetric = true;
    let mut u_shape = true;
    for n in 2..=63usize {
        let w: Vec<f64> = (1..n).map(|s| shap_kernel_weight(n, s)).collect::<Result<_>>()?;
        for s in 1..n {
            let direct = rational_kernel_weight(&pascal, n, s);
            worst_rel = worst_rel.max(((w[s - 1] - direct) / direct).abs());
            symmetric &= w[s - 1] == w[n - s - 1];
        }
        if n >= 4 {
            for s in 1..n - 1 {
                let (a, b) = (w[s - 1], w[s]);
                let next = s + 1;
                // strictly decreasing below the middle, increasing above it
                if 2 * next <= n && b >= a {
                    u_shape = false;
                }
                if 2 * s >= n && b <= a {
                    u_shape = false;
                }
            }
        }
    }
    Ok(check(
        "kernel_weight_law",
        format!("symmetric={symmetric} u_shape={u_shape}"),
        worst_rel,
        1e-12,
        worst_rel <= 1e-12 && symmetric && u_shape,
        "relative error vs rational evaluation for 2 <= n <= 63".into(),
    ))
}

fn game_seed(options: &ValidateOptions, label: &str, n: usize, k: u64) -> u64 {
    rng::derive_seed(options.base_seed, &format!("{label}:{n}:{k}"))
}

fn equivalence_and_axioms(options: &ValidateOptions) -> Result<Vec<CheckResult>> {
    let mut equiv: f64 = 0.0;
    let mut eff_exact: f64 = 0.0;
    let mut eff_ks: f64 = 0.0;
    let mut sym_exact: f64 = 0.0;
    let mut sym_ks: f64 = 0.0;
    let mut null_exact: f64 = 0.0;
    let mut null_ks: f64 = 0.0;
    let mut add_exact: f64 = 0.0;
    let mut add_ks: f64 = 0.0;
    let mut games = 0u64;
    for n in options.n_min.max(2)..=options.n_max {
        for k in 0..options.seeds {
            games += 1;
            let game = random_table_game(n, game_seed(options, "equiv", n, k));
            let e = exact(&game)?;
            let ks = exhaustive_kernelshap(&game, options.fault)?;
            equiv = equiv.max(e.max_abs_diff(&ks));
            eff_exact = eff_exact.max(e.efficiency_gap().abs());
            eff_ks = eff_ks.max(ks.efficiency_gap().abs());

            let (i, j) = ((k as usize) % n, (k as usize + 1) % n);
            let sym = symmetric_pair_game(n, i, j, game_seed(options, "sym", n, k));
            let e = exact(&sym)?;
            sym_exact = sym_exact.max((e.values[i] - e.values[j]).abs());
            let ks = exhaustive_kernelshap(&sym, options.fault)?;
            sym_ks = sym_ks.max((ks.values[i] - ks.values[j]).abs());

            let p = (k as usize * 7) % n;
            let null = null_player_game(n, p, game_seed(options, "null", n, k));
            null_exact = null_exact.max(exact(&null)?.values[p].abs());
            null_ks = null_ks.max(exhaustive_kernelshap(&null, options.fault)?.values[p].abs());

            let u = random_table_game(n, game_seed(options, "add-u", n, k));
            let w = random_table_game(n, game_seed(options, "add-w", n, k));
            let sum = TableGame::new(n, u.values().iter().zip(w.values()).map(|(a, b)| a + b).collect())?;
            let gap = |s: &ShapleyVector, a: &ShapleyVector, b: &ShapleyVector| {
                s.values
                    .iter()
                    .zip(&a.values)
                    .zip(&b.values)
                    .map(|((s, a), b)| (s - a - b).abs())
                    .fold(0.0, f64::max)
            };
            add_exact = add_exact.max(gap(&exact(&sum)?, &exact(&u)?, &exact(&w)?));
            add_ks = add_ks.max(gap(
                &exhaustive_kernelshap(&sum, options.fault)?,
                &exhaustive_kernelshap(&u, options.fault)?,
                &exhaustive_kernelshap(&w, options.fault)?,
            ));
        }
    }
    let detail = format!("{games} seeded games, n in {}..={}", options.n_min.max(2), options.n_max);
    Ok(vec![
        within("exhaustive_equivalence", fmt_value(equiv), equiv, 1e-6, detail.clone()),
        within("efficiency_exact", fmt_value(eff_exact), eff_exact, 1e-9, detail.clone()),
        within("efficiency_kernelshap", fmt_value(eff_ks), eff_ks, 1e-9, detail.clone()),
        within("symmetry_exact", fmt_value(sym_exact), sym_exact, 1e-9, detail.clone()),
        within("symmetry_kernelshap", fmt_value(sym_ks), sym_ks, 1e-9, detail.clone()),
        within("null_player_exact", fmt_value(null_exact), null_exact, 1e-9, detail.clone()),
        within("null_player_kernelshap", fmt_value(null_ks), null_ks, 1e-9, detail.clone()),
        within("additivity_exact", fmt_value(add_exact), add_exact, 1e-9, detail.clone()),
        within("additivity_kernelshap", fmt_value(add_ks), add_ks, 1e-9, detail),
    ])
}

fn mean_abs_error(a: &ShapleyVector, b: &ShapleyVector) -> f64 {
    a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn permutation_convergence(options: &ValidateOptions) -> Result<CheckResult> {
    let trials = options.seeds.max(30);
    let (mut e_small, mut e_large) = (0.0, 0.0);
    for k in 0..trials {
        let game = random_table_game(8, game_seed(options, "perm-game", 8, k));
        let truth = exact(&game)?;
        let cache = ValueCache::new();
        let seed = game_seed(options, "perm-seed", 8, k);
        e_small += mean_abs_error(&permutation_shapley(&game, &cache, 1_000, seed)?, &truth);
        e_large += mean_abs_error(&permutation_shapley(&game, &cache, 10_000, seed)?, &truth);
    }
    e_small /= trials as f64;
    e_large /= trials as f64;
    Ok(check(
        "permutation_convergence",
        format!("err@1k={e_small:.4} err@10k={e_large:.4}"),
        e_small,
        0.05,
        e_large < e_small && e_small < 0.05 && e_large < 0.05,
        format!("{trials} seeded 8-player games"),
    ))
}

/// Sampled-plan KernelSHAP against exact Shapley on noiseless sim games.
pub fn sampled_plan_fidelity(n: usize, trials: u64, base_seed: u64) -> Result<(f64, f64)> {
    let mut hits = 0u64;
    let mut err = 0.0;
    for k in 0..trials {
        let spec = SimGameSpec::random(n, rng::derive_seed(base_seed, &format!("fidelity-game:{n}:{k}")), RandomGameOptions::default())?;
        let oracle = SimValueOracle(&spec);
        let cache = ValueCache::new();
        let truth = exact_shapley(&oracle, &cache)?;
        let plan = build_sampling_plan(n, rng::derive_seed(base_seed, &format!("fidelity-plan:{n}:{k}")))?;
        let (phi, _) = kernelshap(&oracle, &cache, &plan)?;
        hits += u64::from(phi.argmax() == truth.argmax());
        err += mean_abs_error(&phi, &truth);
    }
    Ok((hits as f64 / trials as f64, err / trials as f64))
}

fn fidelity(options: &ValidateOptions) -> Result<CheckResult> {
    let mut worst_rate: f64 = 1.0;
    let mut worst_err: f64 = 0.0;
    for n in [11, 12] {
        let (rate, err) = sampled_plan_fidelity(n, 100, options.base_seed)?;
        worst_rate = worst_rate.min(rate);
        worst_err = worst_err.max(err);
    }
    Ok(check(
        "sampled_plan_fidelity",
        format!("argmax_rate={worst_rate:.2} mean_err={worst_err:.4}"),
        worst_err,
        0.1,
        worst_rate >= 0.95 && worst_err <= 0.1,
        "100 noiseless sim games each at n=11 and n=12".into(),
    ))
}

fn expected_utility(options: &ValidateOptions) -> Result<Vec<CheckResult>> {
    let weights = UtilityWeights::default();
    let n = 8;
    let noisy = SimGameSpec::random(
        n,
        rng::derive_seed(options.base_seed, "eu-noisy"),
        RandomGameOptions {
            noise_std: 1.0,
            ..Default::default()
        },
    )?;
    let episode = sim_episode(&noisy, "eu-noisy")?;
    let backend = sim_rollout_backend(&noisy, &weights, 20)?;
    let game = EpisodeGame {
        episode: &episode,
        backend: &backend,
        weights: &weights,
        rollouts: 400,
        base_seed: options.base_seed,
    };
    let mut r = rng::seeded(rng::derive_seed(options.base_seed, "eu-coalitions"));
    let bound = 3.0 * noisy.noise_std / 400f64.sqrt();
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..20 {
        let c = Coalition::from_mask(rng::below(&mut r, 1 << n));
        let v = game.evaluate(c).map_err(crate::error::Error::from)?.value;
        worst_ratio = worst_ratio.max((v - sim_expected_value(&noisy, c)).abs() / bound);
    }
    let mc = check(
        "expected_utility_monte_carlo",
        format!("max |v - E[v]| / (3 sigma / sqrt(J)) = {worst_ratio:.3}"),
        worst_ratio,
        1.0,
        worst_ratio <= 1.0,
        "20 random coalitions, sigma=1, J=400".into(),
    );

    let clean = SimGameSpec::random(6, rng::derive_seed(options.base_seed, "eu-clean"), RandomGameOptions::default())?;
    let episode = sim_episode(&clean, "eu-clean")?;
    let backend = sim_rollout_backend(&clean, &weights, 20)?;
    let through = EpisodeGame {
        episode: &episode,
        backend: &backend,
        weights: &weights,
        rollouts: 2,
        base_seed: options.base_seed,
    };
    let direct = SimValueOracle(&clean);
    let mut worst: f64 = 0.0;
    worst = worst.max(exact(&through)?.max_abs_diff(&exact(&direct)?));
    let perm_seed = rng::derive_seed(options.base_seed, "eu-perm");
    worst = worst.max(
        permutation_shapley(&through, &ValueCache::new(), 200, perm_seed)?
            .max_abs_diff(&permutation_shapley(&direct, &ValueCache::new(), 200, perm_seed)?),
    );
    let plan = build_sampling_plan(6, perm_seed)?;
    worst = worst.max(
        kernelshap(&through, &ValueCache::new(), &plan)?
            .0
            .max_abs_diff(&kernelshap(&direct, &ValueCache::new(), &plan)?.0),
    );
    let paths = within(
        "expected_utility_paths",
        fmt_value(worst),
        worst,
        1e-9,
        "exact, permutation and KernelSHAP through rollouts vs the closed form, sigma=0".into(),
    );
    Ok(vec![mc, paths])
}

/// Runs every check and collects the report.
pub fn run_validation(options: &ValidateOptions) -> Result<ValidationReport> {
    let mut checks = vec![three_utterance_check(options)?];
    checks.extend(negotiation_checks(options)?);
    checks.push(kernel_weight_law()?);
    checks.extend(equivalence_and_axioms(options)?);
    checks.push(permutation_convergence(options)?);
    checks.push(fidelity(options)?);
    checks.extend(expected_utility(options)?);
    Ok(ValidationReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Every coalition value of a table game, for reports.
pub fn table_values(game: &TableGame) -> Vec<(u64, f64)> {
    all_coalitions(game.players().len())
        .expect("table games are enumerable")
        .into_iter()
        .map(|c| (c.mask(), game.value(c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructed_games_have_their_properties() {
        let g = symmetric_pair_game(5, 1, 3, 4);
        for m in 0..32u64 {
            let c = Coalition::from_mask(m);
            let swapped = if c.contains(1) != c.contains(3) {
                Coalition::from_mask(m ^ 0b1010)
            } else {
                c
            };
            assert_eq!(g.value(c), g.value(swapped));
        }
        let g = null_player_game(5, 2, 4);
        for m in 0..32u64 {
            assert_eq!(g.value(Coalition::from_mask(m)), g.value(Coalition::from_mask(m | 0b100)));
        }
        assert_eq!(table_values(&g).len(), 32);
    }

    #[test]
    fn pascal_matches_known_values() {
        let p = pascal_triangle(63);
        assert_eq!(p[4][2], 6);
        assert_eq!(p[63][31], 916_312_070_471_295_267);
    }

    #[test]
    fn quick_battery_passes_and_fault_is_detected() {
        let options = ValidateOptions {
            n_min: 2,
            n_max: 6,
            seeds: 5,
            ..Default::default()
        };
        let report = equivalence_and_axioms(&options).unwrap();
        assert!(report.iter().all(|c| c.passed), "{report:#?}");
        let faulty = equivalence_and_axioms(&ValidateOptions {
            fault: Some(Fault::KernelWeight),
            ..options
        })
        .unwrap();
        let by_name = |name: &str| faulty.iter().find(|c| c.name == name).unwrap().passed;
        assert!(by_name("efficiency_kernelshap"));
        assert!(!by_name("exhaustive_equivalence"));
    }
}

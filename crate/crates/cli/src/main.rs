use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use savoir_core::kernelshap::{build_sampling_plan, coalition_budget};
use savoir_core::oracle::{sim_episode, ExternalOracleConfig, RandomGameOptions, SimGameSpec, Transport};
use savoir_core::pipeline::{emit_records, AttributionConfig, AttributionResult, Attributor, BackendKind, EpisodeInput, SolverKind};
use savoir_core::rng::derive_seed;
use savoir_core::validate::{run_validation, sampled_plan_fidelity, Fault, ValidateOptions};
use savoir_core::Error;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "savoir", version, about = "Shapley credit assignment for dialogue agent utterances")]
struct Cli {
    /// Print extra progress detail to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attribute episodes and write per-episode records and results.
    Attribute(AttributeArgs),
    /// Run the self-check battery and report pass/fail per property.
    Validate(ValidateArgs),
    /// Measure sampled-plan accuracy against exact Shapley on simulated games.
    BenchSampler(BenchArgs),
    /// Concatenate per-episode record files into one dataset with a manifest.
    EmitDataset(EmitArgs),
    /// Write a corpus of simulated episodes.
    SimDemo(SimDemoArgs),
}

#[derive(Args, Debug)]
struct AttributeArgs {
    /// Episode JSON files, or directories of them.
    #[arg(required = true)]
    episodes: Vec<PathBuf>,
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured solver.
    #[arg(long)]
    solver: Option<SolverArg>,
    /// Override the configured backend.
    #[arg(long)]
    backend: Option<BackendArg>,
    /// Override the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel width; never changes results.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for <episode>.jsonl and <episode>.result.json.
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Also write a JSON run report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// External oracle endpoint: host:port for TCP, otherwise a command line
    /// to spawn. Wins over the config file.
    #[arg(long, env = "SAVOIR_ORACLE_ENDPOINT")]
    endpoint: Option<String>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum SolverArg {
    Exact,
    Permutation,
    Kernelshap,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum BackendArg {
    Sim,
    External,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Smallest player count for the exhaustive checks.
    #[arg(long, default_value_t = 2)]
    n_min: usize,
    /// Largest player count for the exhaustive checks (at most 20).
    #[arg(long, default_value_t = 10)]
    n_max: usize,
    /// Random games per player count.
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    /// Base seed for game generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deliberately break a component to confirm the battery notices.
    #[arg(long)]
    inject_fault: Option<FaultArg>,
    /// Write the machine-readable report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum FaultArg {
    KernelWeight,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 11)]
    n_min: usize,
    #[arg(long, default_value_t = 12)]
    n_max: usize,
    /// Seeded games per player count.
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the table as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmitArgs {
    /// Directory holding <episode>.jsonl and <episode>.result.json files.
    results: PathBuf,
    /// Dataset file; the manifest is written next to it.
    #[arg(long, default_value = "dataset.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimDemoArgs {
    /// Directory for the episode files.
    #[arg(long, default_value = "episodes")]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    episodes: usize,
    /// Agent actions per episode.
    #[arg(long, default_value_t = 8)]
    actions: usize,
    /// Seed for the embedded simulated games.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise of the embedded games' rollout utilities.
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let verbose = cli.verbose;
    let outcome = match cli.command {
        Command::Attribute(a) => attribute(a, verbose),
        Command::Validate(a) => validate(a),
        Command::BenchSampler(a) => bench(a),
        Command::EmitDataset(a) => emit_dataset(a),
        Command::SimDemo(a) => sim_demo(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_class(&e))
        }
    }
}

const EXIT_OTHER: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_SOLVER: u8 = 4;

fn exit_class(e: &Error) -> u8 {
    match e {
        Error::Json(_) | Error::InvalidEpisode(_) | Error::Config(_) | Error::KeyMismatch(_) => EXIT_PARSE,
        Error::Oracle(_) | Error::Backend { .. } => EXIT_BACKEND,
        Error::RankDeficient { .. }
        | Error::NonFinite(_)
        | Error::Domain(_)
        | Error::Budget { .. }
        | Error::PlayerCount(_)
        | Error::InvalidCoalition { .. } => EXIT_SOLVER,
        Error::Io(_) => EXIT_OTHER,
    }
}

/// Writes through a sibling temp file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn expand_inputs(paths: &[PathBuf]) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn infer_transport(endpoint: &str) -> Transport {
    let tcp_like = !endpoint.contains(char::is_whitespace)
        && endpoint
            .rsplit_once(':')
            .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
    if tcp_like {
        Transport::Tcp
    } else {
        Transport::StdioSubprocess
    }
}

fn build_config(args: &AttributeArgs) -> Result<AttributionConfig, Error> {
    let mut config = match &args.config {
        Some(path) => AttributionConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
            other => other,
        })?,
        None => AttributionConfig::default(),
    };
    if let Some(s) = args.solver {
        config.solver = match s {
            SolverArg::Exact => SolverKind::Exact,
            SolverArg::Permutation => SolverKind::Permutation,
            SolverArg::Kernelshap => SolverKind::Kernelshap,
        };
    }
    if let Some(b) = args.backend {
        config.backend = match b {
            BackendArg::Sim => BackendKind::Sim,
            BackendArg::External => BackendKind::External,
        };
    }
    if let Some(seed) = args.seed {
        config.base_seed = seed;
    }
    if let Some(jobs) = args.jobs {
        config.jobs = jobs.max(1);
    }
    if let Some(endpoint) = &args.endpoint {
        match config.external.as_mut() {
            Some(ext) => {
                ext.transport = infer_transport(endpoint);
                ext.endpoint = endpoint.clone();
            }
            None => config.external = Some(ExternalOracleConfig::new(infer_transport(endpoint), endpoint.clone())),
        }
    }
    config.validate()?;
    Ok(config)
}

#[derive(Serialize)]
struct EpisodeSummary {
    path: String,
    episode_id: String,
    n: usize,
    coalitions: usize,
    solver: SolverKind,
    sum_phi: f64,
    surplus: f64,
    residual: Option<f64>,
    records: usize,
}

#[derive(Serialize)]
struct Failure {
    path: String,
    exit_class: u8,
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    unevaluated_masks: Vec<u64>,
}

#[derive(Serialize)]
struct RunReport {
    config_fingerprint: String,
    succeeded: Vec<EpisodeSummary>,
    failed: Vec<Failure>,
}

fn load_input(path: &Path) -> Result<EpisodeInput, Error> {
    let input = EpisodeInput::load(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidEpisode(format!("cannot read: {io}")),
        other => other,
    })?;
    let id = &input.episode.episode_id;
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(Error::InvalidEpisode(format!("episode id {id:?} is not usable as a file name")));
    }
    Ok(input)
}

fn attribute_one(attributor: &Attributor, path: &Path, input: &EpisodeInput, out: &Path) -> Result<EpisodeSummary, Error> {
    let id = input.episode.episode_id.clone();
    let result: AttributionResult = attributor.attribute(input)?;
    let mut records = Vec::new();
    let count = emit_records(&input.episode, &result, &mut records)?;
    let mut json = serde_json::to_vec_pretty(&result)?;
    json.push(b'\n');
    write_atomic(&out.join(format!("{id}.jsonl")), &records)?;
    write_atomic(&out.join(format!("{id}.result.json")), &json)?;
    let phi = &result.raw_phi;
    Ok(EpisodeSummary {
        path: path.display().to_string(),
        episode_id: id,
        n: phi.len(),
        coalitions: result.sampling_plan_summary.coalitions_evaluated,
        solver: result.sampling_plan_summary.solver,
        sum_phi: phi.sum(),
        surplus: phi.v_full - phi.v_empty,
        residual: result.diagnostics.as_ref().map(|d| d.weighted_residual_sum_of_squares),
        records: count,
    })
}

fn attribute(args: AttributeArgs, verbose: bool) -> Result<u8, Error> {
    let config = build_config(&args)?;
    let paths = expand_inputs(&args.episodes)?;
    if paths.is_empty() {
        return Err(Error::InvalidEpisode("no episode files given".into()));
    }
    fs::create_dir_all(&args.out)?;
    let mut seen = BTreeSet::new();
    let inputs: Vec<Result<EpisodeInput, Error>> = paths
        .iter()
        .map(|p| {
            let input = load_input(p)?;
            if !seen.insert(input.episode.episode_id.clone()) {
                return Err(Error::InvalidEpisode(format!("duplicate episode id {:?}", input.episode.episode_id)));
            }
            Ok(input)
        })
        .collect();
    // episodes share the width; leftover width goes to coalition evaluation
    let workers = config.jobs.min(paths.len()).max(1);
    let mut per_episode = config.clone();
    per_episode.jobs = (config.jobs / workers).max(1);
    let attributor = Attributor::new(per_episode)?;
    if verbose {
        eprintln!("{} episode(s), solver {}, fingerprint {}", paths.len(), config.solver, config.fingerprint());
    }

    let slots: Vec<Mutex<Option<Result<EpisodeSummary, Error>>>> = paths.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap_or_else(|e| e.into_inner());
                    if *n >= paths.len() {
                        break;
                    }
                    *n += 1;
                    *n - 1
                };
                if let Ok(input) = &inputs[i] {
                    let outcome = attribute_one(&attributor, &paths[i], input, &args.out);
                    if verbose {
                        eprintln!("done {}", paths[i].display());
                    }
                    *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(outcome);
                }
            });
        }
    });

    let mut report = RunReport {
        config_fingerprint: config.fingerprint(),
        succeeded: Vec::new(),
        failed: Vec::new(),
    };
    for ((path, slot), input) in paths.iter().zip(slots).zip(inputs) {
        let outcome = match input {
            // keep the original error so its exit class survives
            Err(e) => Err(e),
            Ok(_) => slot.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every episode ran"),
        };
        match outcome {
            Ok(s) => {
                let residual = s.residual.map_or_else(|| "-".to_string(), |r| format!("{r:.3e}"));
                println!(
                    "{}: n={} K={} solver={} sum_phi={:.6} v(N)-v(empty)={:.6} residual={}",
                    s.episode_id, s.n, s.coalitions, s.solver, s.sum_phi, s.surplus, residual
                );
                report.succeeded.push(s);
            }
            Err(e) => {
                eprintln!("FAILED {}: {e}", path.display());
                let unevaluated_masks = match &e {
                    Error::Backend { unevaluated, .. } => unevaluated.clone(),
                    _ => Vec::new(),
                };
                report.failed.push(Failure {
                    path: path.display().to_string(),
                    exit_class: exit_class(&e),
                    error: e.to_string(),
                    unevaluated_masks,
                });
            }
        }
    }
    println!("{} of {} episode(s) attributed", report.succeeded.len(), paths.len());
    if let Some(path) = &args.report {
        write_atomic(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    if report.failed.is_empty() {
        return Ok(0);
    }
    let classes: BTreeSet<u8> = report.failed.iter().map(|f| f.exit_class).collect();
    eprintln!(
        "failed episode(s): {}",
        report.failed.iter().map(|f| f.path.as_str()).collect::<Vec<_>>().join(", ")
    );
    Ok(if classes.len() == 1 { classes.into_iter().next().unwrap_or(EXIT_OTHER) } else { EXIT_OTHER })
}

fn validate(args: ValidateArgs) -> Result<u8, Error> {
    if args.n_min > args.n_max || args.n_max > savoir_core::game::MAX_ENUMERATION_PLAYERS {
        return Err(Error::Config(format!(
            "need n-min <= n-max <= {}",
            savoir_core::game::MAX_ENUMERATION_PLAYERS
        )));
    }
    let options = ValidateOptions {
        n_min: args.n_min,
        n_max: args.n_max,
        seeds: args.seeds,
        base_seed: args.seed,
        fault: args.inject_fault.map(|FaultArg::KernelWeight| Fault::KernelWeight),
    };
    let report = run_validation(&options)?;
    for check in &report.checks {
        println!("{}", check.line());
    }
    println!("overall: {}", if report.passed { "pass" } else { "FAIL" });
    if let Some(path) = &args.report {
        write_atomic(path, &serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(if report.passed { 0 } else { EXIT_OTHER })
}

#[derive(Serialize)]
struct BenchRow {
    n: usize,
    budget_k: usize,
    mandatory: usize,
    mean_distinct_sampled: f64,
    argmax_rate: f64,
    mean_abs_error: f64,
}

fn bench(args: BenchArgs) -> Result<u8, Error> {
    if args.n_min < 2 || args.n_min > args.n_max || args.n_max > savoir_core::game::MAX_ENUMERATION_PLAYERS {
        return Err(Error::Config(format!(
            "need 2 <= n-min <= n-max <= {}",
            savoir_core::game::MAX_ENUMERATION_PLAYERS
        )));
    }
    if args.trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    let mut rows = Vec::new();
    println!("n\tK\tmandatory\tsampled\targmax_rate\tmean_abs_error");
    for n in args.n_min..=args.n_max {
        let mut distinct = 0usize;
        let mut mandatory = 0usize;
        for k in 0..args.trials {
            let plan = build_sampling_plan(n, derive_seed(args.seed, &format!("fidelity-plan:{n}:{k}")))?;
            distinct += plan.sampled.len();
            mandatory = plan.mandatory.len();
        }
        let (rate, err) = sampled_plan_fidelity(n, args.trials, args.seed)?;
        let row = BenchRow {
            n,
            budget_k: coalition_budget(n),
            mandatory,
            mean_distinct_sampled: distinct as f64 / args.trials as f64,
            argmax_rate: rate,
            mean_abs_error: err,
        };
        println!(
            "{}\t{}\t{}\t{:.1}\t{:.3}\t{:.4}",
            row.n, row.budget_k, row.mandatory, row.mean_distinct_sampled, row.argmax_rate, row.mean_abs_error
        );
        rows.push(row);
    }
    if let Some(path) = &args.report {
        write_atomic(path, &serde_json::to_vec_pretty(&rows)?)?;
    }
    Ok(0)
}

#[derive(Serialize)]
struct Manifest {
    episodes: usize,
    records: usize,
    config_fingerprints: Vec<String>,
    files: Vec<String>,
}

fn emit_dataset(args: EmitArgs) -> Result<u8, Error> {
    let mut files: Vec<PathBuf> = match fs::read_dir(&args.results) {
        Ok(dir) => dir
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(e) => return Err(Error::Config(format!("{}: {e}", args.results.display()))),
    };
    files.sort();
    if files.is_empty() {
        eprintln!("no results in {}", args.results.display());
        return Ok(EXIT_OTHER);
    }
    let mut dataset = Vec::new();
    let mut records = 0usize;
    let mut fingerprints: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for file in &files {
        let text = fs::read_to_string(file)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            serde_json::from_str::<savoir_core::pipeline::RewardRecord>(line)
                .map_err(|e| Error::InvalidEpisode(format!("{}: {e}", file.display())))?;
            dataset.extend_from_slice(line.as_bytes());
            dataset.push(b'\n');
            records += 1;
        }
        let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let sidecar = file.with_file_name(format!("{stem}.result.json"));
        let fingerprint = fs::read_to_string(&sidecar)
            .ok()
            .and_then(|t| serde_json::from_str::<AttributionResult>(&t).ok())
            .map_or_else(|| "unknown".to_string(), |r| r.config_fingerprint);
        fingerprints.entry(fingerprint).or_default().push(stem);
    }
    if fingerprints.len() > 1 {
        let groups: Vec<String> = fingerprints.iter().map(|(f, eps)| format!("{f} ({} episode(s))", eps.len())).collect();
        eprintln!("warning: results come from different configurations: {}", groups.join(", "));
    }
    let manifest = Manifest {
        episodes: files.len(),
        records,
        config_fingerprints: fingerprints.keys().cloned().collect(),
        files: files
            .iter()
            .map(|f| f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect(),
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&args.out, &dataset)?;
    let mut manifest_path = args.out.as_os_str().to_owned();
    manifest_path.push(".manifest.json");
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(Path::new(&manifest_path), &json)?;
    println!("{} record(s) from {} episode(s) -> {}", records, files.len(), args.out.display());
    Ok(0)
}

fn sim_demo(args: SimDemoArgs) -> Result<u8, Error> {
    fs::create_dir_all(&args.out)?;
    for k in 0..args.episodes {
        let id = format!("sim-{k:03}");
        let game = SimGameSpec::random(
            args.actions,
            derive_seed(args.seed, &format!("demo:{id}")),
            RandomGameOptions {
                noise_std: args.noise_std,
                ..Default::default()
            },
        )?;
        let input = EpisodeInput {
            episode: sim_episode(&game, &id)?,
            sim_game: Some(game),
        };
        let mut text = input.to_json();
        text.push('\n');
        write_atomic(&args.out.join(format!("{id}.json")), text.as_bytes())?;
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "wrote {} episode(s) to {}", args.episodes, args.out.display())?;
    Ok(0)
}

//! Line-delimited JSON rollout harness over stdin/stdout that answers with
//! the simulated game of each episode, as the attribution engine's sim
//! backend would. Useful for exercising the external backend end to end.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use savoir_core::oracle::sim::sim_wire_scores;
use savoir_core::oracle::{RandomGameOptions, SimGameSpec};
use savoir_core::pipeline::EpisodeInput;
use savoir_core::rng::derive_seed;
use savoir_core::rollout::UtilityWeights;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "savoir-sim-oracle", version, about = "Simulated rollout harness speaking the line-JSON protocol on stdio")]
struct Args {
    /// Episode JSON files or directories; each episode's game is its
    /// embedded one, or else derived from the settings below.
    #[arg(required = true)]
    episodes: Vec<PathBuf>,
    /// Same meaning as `sim.game_seed` in the attribution config.
    #[arg(long, default_value_t = 0)]
    game_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    synergy_scale: f64,
    #[arg(long, default_value_t = 0.0)]
    partner_response_gain: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
}

fn episode_files(paths: &[PathBuf]) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)?
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

fn load_games(args: &Args) -> Result<HashMap<String, SimGameSpec>, String> {
    let mut games = HashMap::new();
    for path in episode_files(&args.episodes).map_err(|e| e.to_string())? {
        // unreadable episodes are skipped; requests for them get an error line
        let Ok(input) = EpisodeInput::load(&path) else { continue };
        let id = input.episode.episode_id.clone();
        let game = match input.sim_game {
            Some(g) => g,
            None => SimGameSpec::random(
                input.episode.num_actions(),
                derive_seed(args.game_seed, &format!("game:{id}")),
                RandomGameOptions {
                    synergy_scale: args.synergy_scale,
                    partner_response_gain: args.partner_response_gain,
                    noise_std: args.noise_std,
                },
            )
            .map_err(|e| format!("{}: {e}", path.display()))?,
        };
        games.insert(id, game);
    }
    Ok(games)
}

fn answer(games: &HashMap<String, SimGameSpec>, weights: &UtilityWeights, line: &str) -> Value {
    let Ok(req) = serde_json::from_str::<Value>(line) else {
        return json!({"error": "request is not JSON"});
    };
    let id = req["request_id"].clone();
    let episode = req["episode_id"].as_str().unwrap_or_default();
    let Some(game) = games.get(episode) else {
        return json!({"request_id": id, "error": format!("unknown episode {episode:?}")});
    };
    let (Some(mask), Some(seed)) = (req["coalition_mask"].as_u64(), req["rollout_seed"].as_u64()) else {
        return json!({"request_id": id, "error": "missing coalition_mask or rollout_seed"});
    };
    match sim_wire_scores(game, weights, mask, seed) {
        Ok(scores) => json!({"request_id": id, "dimension_scores": scores}),
        Err(e) => json!({"request_id": id, "error": e.to_string()}),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let games = match load_games(&args) {
        Ok(g) => g,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let weights = UtilityWeights::default();
    let stdin = std::io::stdin().lock();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = answer(&games, &weights, &line);
        if writeln!(stdout, "{reply}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use savoir_core::oracle::{sim_episode, RandomGameOptions, SimGameSpec};
use savoir_core::pipeline::EpisodeInput;

fn savoir() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_savoir"));
    cmd.env_remove("SAVOIR_ORACLE_ENDPOINT");
    cmd
}

fn run(args: &[&str]) -> Output {
    savoir().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_episode(dir: &Path, id: &str, n: usize, seed: u64) -> PathBuf {
    let game = SimGameSpec::random(n, seed, RandomGameOptions::default()).unwrap();
    let input = EpisodeInput {
        episode: sim_episode(&game, id).unwrap(),
        sim_game: Some(game),
    };
    let path = dir.join(format!("{id}.json"));
    fs::write(&path, input.to_json()).unwrap();
    path
}

fn corpus(dir: &Path, sizes: &[usize]) -> PathBuf {
    let eps = dir.join("episodes");
    fs::create_dir_all(&eps).unwrap();
    for (k, &n) in sizes.iter().enumerate() {
        write_episode(&eps, &format!("ep{k}"), n, k as u64 + 10);
    }
    eps
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn three_episodes_happy_path() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[3, 4, 5]);
    let out = tmp.path().join("out");
    let o = run(&["attribute", s(&eps), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = read_dir_sorted(&out);
    let names: Vec<&str> = files.iter().map(|f| f.0.as_str()).collect();
    assert_eq!(
        names,
        ["ep0.jsonl", "ep0.result.json", "ep1.jsonl", "ep1.result.json", "ep2.jsonl", "ep2.result.json"]
    );
    let text = stdout(&o);
    assert!(text.contains("ep1: n=4 "), "{text}");
    assert!(text.contains("sum_phi=") && text.contains("v(N)-v(empty)="));
    assert!(text.contains("3 of 3 episode(s) attributed"));
    let records = String::from_utf8(files[2].1.clone()).unwrap();
    assert_eq!(records.lines().count(), 4);
}

#[test]
fn malformed_episode_is_named_and_others_finish() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[3, 4]);
    fs::write(eps.join("broken.json"), "{\"episode_id\": \"broken\", \"turns\": [").unwrap();
    let out = tmp.path().join("out");
    let o = run(&["attribute", s(&eps), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.json"), "{}", stderr(&o));
    let results = read_dir_sorted(&out).into_iter().filter(|f| f.0.ends_with(".result.json")).count();
    assert_eq!(results, 2);
}

#[test]
fn episode_without_agent_turns_is_a_parse_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("quiet.json");
    fs::write(
        &path,
        r#"{"episode_id": "quiet", "turns": [{"speaker": "partner", "text": "hi"}]}"#,
    )
    .unwrap();
    let o = run(&["attribute", s(&path), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn duplicate_episode_ids_fail_the_second_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[3]);
    fs::copy(eps.join("ep0.json"), eps.join("ep0-copy.json")).unwrap();
    let o = run(&["attribute", s(&eps), "--out", s(&tmp.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ep0.json") && stderr(&o).contains("duplicate"), "{}", stderr(&o));
}

#[test]
fn reruns_and_job_widths_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[7, 8, 4]);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    assert!(run(&["attribute", s(&eps), "--out", s(&a)]).status.success());
    assert!(run(&["attribute", s(&eps), "--out", s(&b)]).status.success());
    assert!(run(&["attribute", s(&eps), "--out", s(&c), "--jobs", "4"]).status.success());
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&b));
    assert_eq!(read_dir_sorted(&a), read_dir_sorted(&c));
}

#[test]
fn seed_override_moves_sampled_but_not_exact_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[8]);
    let phi = |solver: &str, seed: &str| {
        let out = tmp.path().join(format!("{solver}-{seed}"));
        let o = run(&["attribute", s(&eps), "--solver", solver, "--seed", seed, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ep0.result.json")).unwrap()).unwrap();
        v["raw_phi"]["values"].clone()
    };
    assert_ne!(phi("kernelshap", "1"), phi("kernelshap", "2"));
    assert_ne!(phi("permutation", "1"), phi("permutation", "2"));
    assert_eq!(phi("exact", "1"), phi("exact", "2"));
}

#[test]
fn config_file_is_honoured_and_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[4]);
    let config = tmp.path().join("savoir.toml");
    fs::write(&config, "solver = \"exact\"\nrollouts = 3\n").unwrap();
    let out = tmp.path().join("out");
    let o = run(&["attribute", s(&eps), "--config", s(&config), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("solver=exact"));
    // the command line wins over the file
    let o = run(&["attribute", s(&eps), "--config", s(&config), "--solver", "permutation", "--out", s(&out)]);
    assert!(stdout(&o).contains("solver=permutation"));

    fs::write(&config, "solver = \"exact\"\nrollout = 3\n").unwrap();
    let o = run(&["attribute", s(&eps), "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rollout"), "{}", stderr(&o));
}

#[test]
fn external_backend_over_stdio_matches_sim() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[5, 6]);
    let local = tmp.path().join("local");
    let wire = tmp.path().join("wire");
    assert!(run(&["attribute", s(&eps), "--out", s(&local)]).status.success());
    let harness = format!("{} {}", env!("CARGO_BIN_EXE_savoir-sim-oracle"), s(&eps));
    let o = run(&["attribute", s(&eps), "--backend", "external", "--endpoint", &harness, "--out", s(&wire)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let strip = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        // fingerprints differ (backend is part of the config); records must not
        files.into_iter().filter(|f| f.0.ends_with(".jsonl")).collect()
    };
    assert_eq!(strip(read_dir_sorted(&local)), strip(read_dir_sorted(&wire)));
}

#[test]
fn endpoint_flag_wins_over_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[3]);
    let harness = format!("{} {}", env!("CARGO_BIN_EXE_savoir-sim-oracle"), s(&eps));
    let out = tmp.path().join("out");
    let o = savoir()
        .env("SAVOIR_ORACLE_ENDPOINT", "127.0.0.1:1")
        .args(["attribute", s(&eps), "--backend", "external", "--endpoint", &harness, "--out", s(&out)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    let o = savoir()
        .env("SAVOIR_ORACLE_ENDPOINT", &harness)
        .args(["attribute", s(&eps), "--backend", "external", "--out", s(&out)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unreachable_oracle_is_a_backend_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[3]);
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = listener.local_addr().unwrap().to_string();
    drop(listener);
    let o = run(&["attribute", s(&eps), "--backend", "external", "--endpoint", &endpoint, "--out", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("ep0.json"));
}

#[test]
fn emit_dataset_concatenates_with_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let eps = corpus(tmp.path(), &[4, 6]);
    let res = tmp.path().join("res");
    assert!(run(&["attribute", s(&eps), "--out", s(&res)]).status.success());
    let data = tmp.path().join("data").join("d.jsonl");
    let o = run(&["emit-dataset", s(&res), "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 10);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("data").join("d.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["episodes"], 2);
    assert_eq!(manifest["records"], 10);
    assert_eq!(manifest["config_fingerprints"].as_array().unwrap().len(), 1);
    assert!(!stderr(&o).contains("warning"));

    // a second configuration in the same directory triggers the warning
    let more = tmp.path().join("more");
    fs::create_dir_all(&more).unwrap();
    write_episode(&more, "extra", 3, 99);
    assert!(run(&["attribute", s(&more), "--solver", "exact", "--out", s(&res)]).status.success());
    let o = run(&["emit-dataset", s(&res), "--out", s(&data)]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&data).unwrap().lines().count(), 13);
}

#[test]
fn emit_dataset_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["emit-dataset", s(tmp.path()), "--out", s(&tmp.path().join("d.jsonl"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no results"));
}

#[test]
fn validate_reports_fixtures_and_catches_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("report.json");
    let o = run(&["validate", "--n-max", "6", "--seeds", "5", "--report", s(&report)]);
    let text = stdout(&o);
    assert!(text.contains("appendix_a_phi_a2 = 0.9 (pass)"), "{text}");
    assert!(text.contains("normalization_fixture = (0.83, 4.17, 10.00, 0.00) (pass)"), "{text}");
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["passed"].as_bool().unwrap(), o.status.success());

    let o = run(&["validate", "--n-max", "6", "--seeds", "5", "--inject-fault", "kernel-weight"]);
    assert!(!o.status.success());
    let text = stdout(&o);
    assert!(text.contains("exhaustive_equivalence = ") && text.lines().any(|l| l.starts_with("exhaustive_equivalence") && l.contains("(FAIL)")));
    assert!(text.lines().any(|l| l.starts_with("efficiency_kernelshap") && l.contains("(pass)")));
}

#[test]
fn bench_sampler_prints_a_table() {
    let o = run(&["bench-sampler", "--n-min", "8", "--n-max", "9", "--trials", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("8\t98\t18\t"), "{text}");
}

#[test]
fn sim_demo_writes_loadable_episodes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eps");
    assert!(run(&["sim-demo", "--out", s(&out), "--episodes", "3", "--actions", "5"]).status.success());
    for (name, bytes) in read_dir_sorted(&out) {
        let input = EpisodeInput::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(input.episode.num_actions(), 5, "{name}");
        assert!(input.sim_game.is_some());
    }
}

#[test]
fn help_lists_every_flag() {
    let text = stdout(&run(&["attribute", "--help"]));
    for flag in ["--config", "--solver", "--backend", "--seed", "--jobs", "--out", "--report", "--endpoint", "SAVOIR_ORACLE_ENDPOINT"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert!(text.contains("exact") && text.contains("kernelshap") && text.contains("permutation"));
    let text = stdout(&run(&["validate", "--help"]));
    for flag in ["--n-min", "--n-max", "--seeds", "--inject-fault", "--report"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let text = stdout(&run(&["--help"]));
    for sub in ["attribute", "validate", "bench-sampler", "emit-dataset", "sim-demo"] {
        assert!(text.contains(sub), "missing {sub}");
    }
}

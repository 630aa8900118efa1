//! Exit codes, artifacts and reproducibility of the `uniq` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uniq_core::experiment::{ExperimentConfig, Method};

fn uniq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniq"))
        .args(args)
        .env("UNIQ_MDP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::level2();
    cfg.data.pool_size = 600;
    cfg.data.n_safe = 40;
    cfg.data.n_undesired = 160;
    cfg.data.n_un = 20;
    cfg.data.un_reserve = 40;
    cfg.uniq.steps = 200;
    cfg.uniq.ratio.steps = 2_000;
    cfg.baselines.iq_mix.steps = 200;
    cfg.baselines.iq_un.steps = 200;
    cfg.eval.episodes = 50;
    cfg.seeds = vec![0, 1];
    cfg.methods = Method::ALL.to_vec();
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir`, relative path and bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn verify_passes_and_bad_arguments_exit_two() {
    for prop in ["1", "2", "3"] {
        let out = uniq(&["verify", "--prop", prop, "--trials", "3"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    }
    assert_eq!(code(&uniq(&["verify", "--prop", "4"])), 2);
    assert_eq!(code(&uniq(&["no-such-command"])), 2);
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = [0]\nunknown_key = 1\n").unwrap();
    let out = uniq(&["run-experiment", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown"));

    let cfg = tiny_config(dir.path());
    let out = uniq(&["sweep", "--config", s(&cfg), "--sizes", "0,10"]);
    assert_ne!(code(&out), 0);
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.txt");
    let out = uniq(&[
        "train-uniq",
        "--un",
        s(&missing),
        "--mix",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn stepwise_pipeline_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    assert_eq!(
        code(&uniq(&["gen-env", "--config", s(&cfg), "--out", s(&d.join("env"))])),
        0
    );
    assert_eq!(
        code(&uniq(&[
            "gen-data",
            "--config",
            s(&cfg),
            "--seed",
            "0",
            "--out",
            s(&d.join("data"))
        ])),
        0
    );
    let (un, mix) = (d.join("data/un.txt"), d.join("data/mix.txt"));
    let out = uniq(&[
        "train-ratio",
        "--un",
        s(&un),
        "--mix",
        s(&mix),
        "--steps",
        "500",
        "--out",
        s(&d.join("ratio.json")),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("g = "));

    let uniq_cfg = d.join("uniq.toml");
    fs::write(
        &uniq_cfg,
        "steps = 100\nvalue_mode = \"sampled\"\n[ratio]\nsteps = 500\n",
    )
    .unwrap();
    let out = uniq(&[
        "train-uniq",
        "--un",
        s(&un),
        "--mix",
        s(&mix),
        "--config",
        s(&uniq_cfg),
        "--out",
        s(&d.join("uniq")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["q.json", "policy.json", "loss_trace.csv"] {
        assert!(d.join("uniq").join(f).is_file(), "{f}");
    }

    for kind in ["bc-mix", "bc-un", "dwbc"] {
        let out_dir = d.join(kind);
        let out = uniq(&[
            "train-baseline",
            "--kind",
            kind,
            "--un",
            s(&un),
            "--mix",
            s(&mix),
            "--out",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0, "{kind}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("policy.json").is_file());
    }
    assert_eq!(
        code(&uniq(&[
            "train-baseline",
            "--kind",
            "bc-mix",
            "--un",
            s(&un),
            "--out",
            s(&d.join("x"))
        ])),
        2
    );

    let report = d.join("report.json");
    let out = uniq(&[
        "eval",
        "--mdp",
        s(&d.join("env/mdp.json")),
        "--policy",
        s(&d.join("uniq/policy.json")),
        "--episodes",
        "50",
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["n_episodes"], 50);
    assert!(json["exact_cost"].is_number());
}

#[test]
fn experiment_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&uniq(&["run-experiment", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&uniq(&["run-experiment", "--config", s(&cfg), "--out", s(&b)])), 0);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert_eq!(sa, sb);
    let names: Vec<String> = sa.iter().map(|(p, _)| p.display().to_string()).collect();
    for expected in [
        "manifest.json",
        "aggregate.csv",
        "summary.txt",
        "config.toml",
        "seed-1/uniq/policy.json",
        "seed-0/bc-safe/report.json",
    ] {
        assert!(names.iter().any(|n| n == expected), "missing {expected}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failures"].as_array().unwrap().len(), 0);
    let aggregate = fs::read_to_string(a.join("aggregate.csv")).unwrap();
    assert_eq!(aggregate.lines().count(), 1 + Method::ALL.len());

    let out = uniq(&["sweep", "--config", s(&cfg), "--sizes", "10,20"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).lines().count(),
        1 + 2 * Method::ALL.len()
    );
}

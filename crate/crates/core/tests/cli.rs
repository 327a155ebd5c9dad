use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use preflab::dataset::{read_jsonl, PreferenceSample};
use preflab::env::EnvSpec;
use preflab::trainer::{read_metrics_csv, METRICS_HEADER};

fn preflab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_preflab")).args(args).output().expect("binary runs")
}

fn instance(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("instances").join(name).to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(env: &str, out: &Path, n_pref: &str, seed: &str) -> Output {
    preflab(&["gen", "--env-file", &instance(env), "--out", s(out), "--n-pref", n_pref, "--n-ref", "100000", "--seed", seed])
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn help_exits_zero() {
    assert_eq!(preflab(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_preferences_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen("matching.json", &dir.path().join("d"), "0", "1");
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_env_file_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let env = write(dir.path(), "env.json", "{\n  \"num_responses\": 3,\n  \"rho\": [0.5, 0.6],\n  \"reward\": [[0, 1, 2], [0, 0, 0]]\n}\n");
    let out = preflab(&["gen", "--env-file", s(&env), "--out", s(&dir.path().join("d")), "--n-pref", "10"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("env.json:3:"), "{err}");
}

#[test]
fn bt_manifest_records_mode_and_reward_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(gen("bt.json", &d, "100", "2").status.code(), Some(0));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "bt");
    let hash = manifest["reward_sha256"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["config"]["sft_steps"], 200000);

    let free = dir.path().join("f");
    assert_eq!(gen("matching.json", &free, "100", "2").status.code(), Some(0));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(free.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mode"], "free");
    assert!(manifest["reward_sha256"].is_null());
}

#[test]
fn generated_preferences_match_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let n = 200_000usize;
    assert_eq!(gen("matching.json", &d, &n.to_string(), "3").status.code(), Some(0));
    let env = EnvSpec::load(&d.join("env.json")).unwrap().env;
    let records: Vec<PreferenceSample> = read_jsonl(&d.join("pref.jsonl")).unwrap();
    assert_eq!(records.len(), n);
    let mut counts: HashMap<(usize, usize, usize), (f64, f64)> = HashMap::new();
    for r in &records {
        let e = counts.entry((r.x, r.y_w, r.y_l)).or_default();
        e.0 += 1.0;
        e.1 += r.indicator();
    }
    for (x, a, b, w) in env.support() {
        let (m, wins) = counts[&(x, a, b)];
        // Pair frequency and label rate within 4.5 binomial standard deviations.
        let sd = (n as f64 * w * (1.0 - w)).sqrt();
        assert!((m - n as f64 * w).abs() < 4.5 * sd, "pair count {m} vs {}", n as f64 * w);
        let p = env.p_star(x, a, b);
        let sd = (m * p * (1.0 - p)).sqrt().max(1e-9);
        assert!((wins - m * p).abs() < 4.5 * sd, "wins {wins} of {m} at p* {p}");
    }
}

#[test]
fn train_pure_maximization_and_metrics_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(gen("deterministic.json", &d, "1000", "4").status.code(), Some(0));
    let cfg = write(dir.path(), "c.toml", "method = \"mpo\"\nsteps = 20000\nstep_size = 1.0\nweighted_iter_num = 0\neval_every = 5000\n");
    let out_dir = dir.path().join("t");
    let out = preflab(&["train", "--config", s(&cfg), "--data-dir", s(&d), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    let metrics = read_metrics_csv(&out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![0, 5000, 10000, 15000, 20000]);
    assert!(metrics.last().unwrap().exact_reward > 0.99);
    assert_eq!(std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap().lines().count(), 5);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    for key in ["beta", "gamma", "tau", "step_size", "pref_batch", "seed", "eval_every", "checkpoint_every", "grad_tolerance"] {
        assert!(manifest["config"].get(key).is_some(), "manifest lacks default {key}");
    }
}

#[test]
fn method_flag_overrides_config_and_dpo_needs_reference_policy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(gen("deterministic.json", &d, "100", "5").status.code(), Some(0));
    let cfg = write(dir.path(), "c.toml", "method = \"mpo\"\nsteps = 10\nbeta = 0.1\nweighted_iter_num = 0\n");
    let run = |out: &str| preflab(&["train", "--method", "dpo", "--config", s(&cfg), "--data-dir", s(&d), "--out", s(&dir.path().join(out))]);
    assert_eq!(run("ok").status.code(), Some(0));
    std::fs::remove_file(d.join("ref_policy.json")).unwrap();
    let out = run("missing");
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ref_policy.json"));
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(gen("deterministic.json", &d, "100", "6").status.code(), Some(0));
    for text in [
        "method = \"mpo\"\nsteps = 10\n",
        "method = \"mpo\"\nsteps = 10\nweighted_iter_num = 11\n",
        "method = \"mpo\"\nsteps = 0\nweighted_iter_num = 0\n",
        "method = \"mpo\"\nsteps = 10\nweighted_iter_num = 0\nmomentum = 0.9\n",
    ] {
        let cfg = write(dir.path(), "c.toml", text);
        let out = preflab(&["train", "--config", s(&cfg), "--data-dir", s(&d), "--out", s(&dir.path().join("t"))]);
        assert_eq!(out.status.code(), Some(1), "{text}");
    }
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(gen("deterministic.json", &d, "100", "7").status.code(), Some(0));
    let cfg = write(dir.path(), "c.toml", "method = \"mpo\"\nsteps = 10\nstep_size = 1e5\nweighted_iter_num = 10\n");
    let out = preflab(&["train", "--config", s(&cfg), "--data-dir", s(&d), "--out", s(&dir.path().join("t"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
}

#[test]
fn verify_runs_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = preflab(&["verify", "--suite", "theorem1", "--trials", "50", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS") && !stdout.contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert!(report["rows"][0]["worst"].as_f64().unwrap() <= 1e-10);
    assert_eq!(preflab(&["verify", "--suite", "nonsense"]).status.code(), Some(1));
}

#[test]
fn compare_reports_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(gen("deterministic.json", &d, "100", "8").status.code(), Some(0));
    let cfg = write(
        dir.path(),
        "cmp.toml",
        "[defaults]\nsteps = 50\neval_every = 10\n\n[[runs]]\nname = \"good\"\nmethod = \"ipo\"\n\n\
         [[runs]]\nname = \"bad\"\nmethod = \"mpo\"\nweighted_iter_num = 50\nstep_size = 1e5\n",
    );
    let out_dir = dir.path().join("c");
    let out = preflab(&["compare", "--config", s(&cfg), "--data-dir", s(&d), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(4));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    let lines: Vec<_> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("good,ipo,ok,50,"));
    assert!(lines[2].starts_with("bad,mpo,") && lines[2].contains("failed"));
    let combined = std::fs::read_to_string(out_dir.join("combined.csv")).unwrap();
    assert!(combined.starts_with("run,method,step,loss_total"));
    assert_eq!(combined.lines().count(), 1 + 6);
    assert!(combined.lines().skip(1).all(|l| l.starts_with("good,ipo,")));
}

use std::path::Path;

use serde::Serialize;
use serde_json::json;

use super::train::{apply_overrides, config_from_table, run_training, write_artifacts, RunArtifacts, RunInputs};
use super::{manifest, required, CompareArgs, Cli, EXIT_OK, EXIT_PARTIAL};
use crate::dataset::tally;
use crate::error::{LabError, Result};
use crate::losses::ref_reg_loss;
use crate::parallel::map_indexed;
use crate::trainer::{MetricsRecord, TrainConfig};

/// Named runs sharing one data directory. Keys under `[defaults]` apply to
/// every `[[runs]]` entry that does not set them.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub runs: Vec<(String, TrainConfig)>,
}

impl CompareConfig {
    pub fn parse(text: &str, path: &Path, seed: Option<u64>) -> Result<Self> {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            LabError::parse(path, line, e.message())
        })?;
        let defaults = match root.remove("defaults") {
            None => toml::Table::new(),
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(LabError::Config("[defaults] must be a table".into())),
        };
        let runs = match root.remove("runs") {
            Some(toml::Value::Array(a)) if !a.is_empty() => a,
            _ => return Err(LabError::Config("compare config needs at least one [[runs]] entry".into())),
        };
        if let Some(key) = root.keys().next() {
            return Err(LabError::Config(format!("unknown top-level key {key:?} in compare config")));
        }
        let mut out: Vec<(String, TrainConfig)> = Vec::new();
        for (k, run) in runs.into_iter().enumerate() {
            let toml::Value::Table(mut table) = run else {
                return Err(LabError::Config(format!("runs[{k}] must be a table")));
            };
            let name = match table.remove("name") {
                Some(toml::Value::String(s)) => s,
                _ => return Err(LabError::Config(format!("runs[{k}] needs a string name"))),
            };
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(LabError::Config(format!("run name {name:?} must be [A-Za-z0-9_-]+")));
            }
            if out.iter().any(|(n, _)| *n == name) {
                return Err(LabError::Config(format!("duplicate run name {name:?}")));
            }
            for (key, value) in &defaults {
                table.entry(key.clone()).or_insert_with(|| value.clone());
            }
            apply_overrides(&mut table, None, seed)?;
            let config = config_from_table(table, path)
                .map_err(|e| LabError::Config(format!("run {name:?}: {e}")))?;
            out.push((name, config));
        }
        Ok(CompareConfig { runs: out })
    }
}

/// Final-step summary of one member run. Columns that do not apply are NaN.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run: String,
    pub method: String,
    pub status: String,
    pub steps_run: usize,
    pub exact_reward: f64,
    pub kl_to_ref: f64,
    pub ref_loglik: f64,
    /// Final minus reference-policy log-likelihood on the reference data.
    pub ref_loglik_change: f64,
    /// Largest `|pi^p - p*|` over the support of the pair distribution.
    pub max_pref_error: f64,
    /// Smallest `pi^p` of the preferred side over pairs with `p* != 1/2`.
    pub min_preferred_prob: f64,
    /// Largest within-context reward-difference error (reward fits on
    /// Bradley-Terry environments).
    pub reward_error: f64,
}

#[derive(Serialize)]
struct CombinedRow<'a> {
    run: &'a str,
    method: &'a str,
    step: usize,
    loss_total: f64,
    loss_rm: f64,
    loss_ref: f64,
    loss_pretrain: f64,
    exact_reward: f64,
    kl_to_ref: f64,
    ref_loglik: f64,
    max_abs_logit: f64,
}

impl<'a> CombinedRow<'a> {
    fn new(run: &'a str, method: &'a str, m: &MetricsRecord) -> Self {
        CombinedRow {
            run,
            method,
            step: m.step,
            loss_total: m.loss_total,
            loss_rm: m.loss_rm,
            loss_ref: m.loss_ref,
            loss_pretrain: m.loss_pretrain,
            exact_reward: m.exact_reward,
            kl_to_ref: m.kl_to_ref,
            ref_loglik: m.ref_loglik,
            max_abs_logit: m.max_abs_logit,
        }
    }
}

pub fn summarize(name: &str, config: &TrainConfig, inputs: &RunInputs, result: &Result<RunArtifacts>) -> RunSummary {
    let mut s = RunSummary {
        run: name.into(),
        method: config.method.as_str().into(),
        status: "ok".into(),
        steps_run: 0,
        exact_reward: f64::NAN,
        kl_to_ref: f64::NAN,
        ref_loglik: f64::NAN,
        ref_loglik_change: f64::NAN,
        max_pref_error: f64::NAN,
        min_preferred_prob: f64::NAN,
        reward_error: f64::NAN,
    };
    let artifacts = match result {
        Ok(a) => a,
        Err(e) => {
            s.status = format!("failed: {e}");
            return s;
        }
    };
    s.steps_run = artifacts.steps_run();
    if let Some(last) = artifacts.metrics().last() {
        s.exact_reward = last.exact_reward;
        s.kl_to_ref = last.kl_to_ref;
        s.ref_loglik = last.ref_loglik;
    }
    match artifacts {
        RunArtifacts::Policy(o) => {
            if let (Some(reference), false) = (&inputs.reference, inputs.data.reference.is_empty()) {
                if let Ok(r) = ref_reg_loss(reference, &tally(&inputs.data.reference), 1.0) {
                    s.ref_loglik_change = s.ref_loglik + r.value;
                }
            }
            let mut err = 0.0f64;
            let mut min_pref = f64::INFINITY;
            for (x, a, b, _) in inputs.env.support() {
                let p = inputs.env.p_star(x, a, b);
                let q = o.policy.pairwise_pref_unchecked(x, a, b);
                err = err.max((q - p).abs());
                if p > 0.5 {
                    min_pref = min_pref.min(q);
                } else if p < 0.5 {
                    min_pref = min_pref.min(1.0 - q);
                }
            }
            s.max_pref_error = err;
            if min_pref.is_finite() {
                s.min_preferred_prob = min_pref;
            }
        }
        RunArtifacts::Reward(f) => {
            if let crate::env::GroundTruth::BradleyTerry(truth) = inputs.env.truth() {
                s.reward_error = f.reward.max_difference_error(truth);
            }
        }
    }
    s
}

pub fn format_summary(rows: &[RunSummary]) -> String {
    let mut out = format!(
        "{:<14} {:<10} {:>7} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}  {}\n",
        "run", "method", "steps", "exact_reward", "kl_to_ref", "ref_loglik", "pref_error", "min_pref", "reward_err", "status"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:<10} {:>7} {:>12.6} {:>12.6} {:>12.6} {:>12.3e} {:>12.6} {:>12.3e}  {}\n",
            r.run,
            r.method,
            r.steps_run,
            r.exact_reward,
            r.kl_to_ref,
            r.ref_loglik,
            r.max_pref_error,
            r.min_preferred_prob,
            r.reward_error,
            r.status
        ));
    }
    out
}

fn csv_error(path: &Path, e: csv::Error) -> LabError {
    LabError::io(path, e.into())
}

/// Run every member of `config` (concurrently when the `parallel` feature
/// is on), writing per-run artifacts under `out/<name>/` plus `combined.csv`
/// and `summary.csv`. Returns the summaries in config order.
pub fn run_comparison(config: &CompareConfig, inputs: &RunInputs, out: &Path) -> Result<Vec<RunSummary>> {
    manifest::create_dir(out)?;
    let results: Vec<Result<RunArtifacts>> = map_indexed(config.runs.len(), |k| {
        let (name, cfg) = &config.runs[k];
        let artifacts = run_training(cfg, inputs)?;
        write_artifacts(&out.join(name), cfg, inputs, &artifacts)?;
        Ok(artifacts)
    });

    let combined_path = out.join("combined.csv");
    let mut w = csv::Writer::from_path(&combined_path).map_err(|e| csv_error(&combined_path, e))?;
    let mut wrote = false;
    for ((name, cfg), result) in config.runs.iter().zip(&results) {
        if let Ok(a) = result {
            for m in a.metrics() {
                w.serialize(CombinedRow::new(name, cfg.method.as_str(), m))
                    .map_err(|e| csv_error(&combined_path, e))?;
                wrote = true;
            }
        }
    }
    if !wrote {
        w.write_record([
            "run", "method", "step", "loss_total", "loss_rm", "loss_ref", "loss_pretrain", "exact_reward",
            "kl_to_ref", "ref_loglik", "max_abs_logit",
        ])
        .map_err(|e| csv_error(&combined_path, e))?;
    }
    w.flush().map_err(|e| LabError::io(&combined_path, e))?;

    let summaries: Vec<RunSummary> = config
        .runs
        .iter()
        .zip(&results)
        .map(|((name, cfg), r)| summarize(name, cfg, inputs, r))
        .collect();
    let summary_path = out.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path).map_err(|e| csv_error(&summary_path, e))?;
    for s in &summaries {
        w.serialize(s).map_err(|e| csv_error(&summary_path, e))?;
    }
    w.flush().map_err(|e| LabError::io(&summary_path, e))?;

    let doc = json!({
        "command": "compare",
        "tool": manifest::tool_version(),
        "inputs": inputs.hashes,
        "runs": config.runs.iter().map(|(n, c)| json!({"name": n, "config": c})).collect::<Vec<_>>(),
        "summary": summaries,
    });
    manifest::write(&out.join("manifest.json"), &doc)?;
    Ok(summaries)
}

pub fn run(cli: &Cli, args: &CompareArgs) -> Result<i32> {
    let out = required(&cli.out, "out")?;
    let config_path = required(&cli.config, "config")?;
    let text = std::fs::read_to_string(&config_path).map_err(|e| LabError::io(&config_path, e))?;
    let config = CompareConfig::parse(&text, &config_path, cli.seed)?;
    let inputs = RunInputs::load(&args.data_dir)?;
    let summaries = run_comparison(&config, &inputs, &out)?;
    print!("{}", format_summary(&summaries));
    if summaries.iter().all(|s| s.status == "ok") {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_PARTIAL)
    }
}

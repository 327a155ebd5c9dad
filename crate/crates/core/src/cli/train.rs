use std::collections::BTreeMap;
use std::path::Path;

use serde_json::json;

use super::{manifest, required, Cli, TrainArgs, EXIT_OK};
use crate::dataset::{read_jsonl, validate_pairs, validate_preferences, PairSample, PreferenceSample};
use crate::env::{EnvSpec, PreferenceEnv};
use crate::error::{LabError, Result};
use crate::policy::TabularPolicy;
use crate::reward::RewardTable;
use crate::trainer::{
    fit_bt_reward, train_baseline, train_mpo, write_metrics_csv, write_metrics_jsonl, Method, MetricsRecord,
    Monitor, RewardFit, TrainConfig, TrainOutcome, TrainingData,
};

/// Everything a run reads from a `gen` output directory.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub env: PreferenceEnv,
    pub data: TrainingData,
    pub reference: Option<TabularPolicy>,
    /// File name to sha256 of each input that was present.
    pub hashes: BTreeMap<String, String>,
}

impl RunInputs {
    pub fn load(dir: &Path) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        let mut note = |name: &str| -> Result<Option<std::path::PathBuf>> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            hashes.insert(name.to_string(), manifest::file_sha256(&path)?);
            Ok(Some(path))
        };
        let env_path = note("env.json")?
            .ok_or_else(|| LabError::Config(format!("{} has no env.json", dir.display())))?;
        let pref_path = note("pref.jsonl")?
            .ok_or_else(|| LabError::Config(format!("{} has no pref.jsonl", dir.display())))?;
        let ref_path = note("ref.jsonl")?;
        let pretrain_path = note("pretrain.jsonl")?;
        let policy_path = note("ref_policy.json")?;

        let env = EnvSpec::load(&env_path)?.env;
        let shape = env.shape();
        let preferences: Vec<PreferenceSample> = read_jsonl(&pref_path)?;
        validate_preferences(&preferences, shape)?;
        let load_pairs = |p: Option<std::path::PathBuf>| -> Result<Vec<PairSample>> {
            match p {
                Some(p) => {
                    let v: Vec<PairSample> = read_jsonl(&p)?;
                    validate_pairs(&v, shape)?;
                    Ok(v)
                }
                None => Ok(Vec::new()),
            }
        };
        let reference_data = load_pairs(ref_path)?;
        let pretrain = load_pairs(pretrain_path)?;
        let reference = match policy_path {
            Some(p) => {
                let policy = TabularPolicy::load_json(&p)?;
                if policy.shape() != shape {
                    return Err(LabError::Shape(format!(
                        "ref_policy.json is {:?} but the environment is {:?}",
                        policy.shape(),
                        shape
                    )));
                }
                Some(policy)
            }
            None => None,
        };
        Ok(RunInputs {
            env,
            data: TrainingData {
                preferences,
                reference: reference_data,
                pretrain,
            },
            reference,
            hashes,
        })
    }

    fn monitor(&self) -> Monitor<'_> {
        Monitor {
            env: Some(&self.env),
            reference: self.reference.as_ref(),
            ref_data: &self.data.reference,
        }
    }
}

/// Parse a TOML run config, applying command-line overrides before
/// validation.
pub fn load_run_config(text: &str, path: &Path, method: Option<&str>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(1);
        LabError::parse(path, line, e.message())
    })?;
    apply_overrides(&mut table, method, seed)?;
    config_from_table(table, path)
}

pub(super) fn apply_overrides(table: &mut toml::Table, method: Option<&str>, seed: Option<u64>) -> Result<()> {
    if let Some(m) = method {
        m.parse::<Method>()?;
        table.insert("method".into(), toml::Value::String(m.into()));
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| LabError::Config(format!("seed {s} exceeds the TOML integer range")))?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    Ok(())
}

pub(super) fn config_from_table(table: toml::Table, path: &Path) -> Result<TrainConfig> {
    let config: TrainConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| LabError::Config(format!("{}: {}", path.display(), e.message())))?;
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone)]
pub enum RunArtifacts {
    Policy(TrainOutcome),
    Reward(RewardFit),
}

impl RunArtifacts {
    pub fn metrics(&self) -> &[MetricsRecord] {
        match self {
            RunArtifacts::Policy(o) => &o.metrics,
            RunArtifacts::Reward(f) => &f.metrics,
        }
    }

    pub fn steps_run(&self) -> usize {
        match self {
            RunArtifacts::Policy(o) => o.steps_run,
            RunArtifacts::Reward(f) => f.steps_run,
        }
    }
}

/// Run the trainer selected by `config.method`. MPO starts from the reference
/// policy when one is available, otherwise from uniform; DPO and IPO require
/// it; reward fitting starts from zero.
pub fn run_training(config: &TrainConfig, inputs: &RunInputs) -> Result<RunArtifacts> {
    let (c, v) = inputs.env.shape();
    let monitor = inputs.monitor();
    match config.method {
        Method::Mpo => {
            let init = inputs.reference.clone().unwrap_or_else(|| TabularPolicy::uniform(c, v));
            train_mpo(&init, &inputs.data, config, &monitor).map(RunArtifacts::Policy)
        }
        Method::Dpo | Method::Ipo => {
            let reference = inputs.reference.as_ref().ok_or_else(|| {
                LabError::Config(format!("{} needs ref_policy.json in the data directory", config.method.as_str()))
            })?;
            train_baseline(reference, reference, &inputs.data.preferences, config, &monitor).map(RunArtifacts::Policy)
        }
        Method::BtReward => {
            fit_bt_reward(&RewardTable::zeros(c, v), &inputs.data.preferences, config).map(RunArtifacts::Reward)
        }
    }
}

/// Write metrics, final parameters, checkpoints and the run manifest.
pub fn write_artifacts(out: &Path, config: &TrainConfig, inputs: &RunInputs, artifacts: &RunArtifacts) -> Result<()> {
    manifest::create_dir(out)?;
    write_metrics_csv(&out.join("metrics.csv"), artifacts.metrics())?;
    write_metrics_jsonl(&out.join("metrics.jsonl"), artifacts.metrics())?;
    let mut extra = serde_json::Map::new();
    match artifacts {
        RunArtifacts::Policy(o) => {
            o.policy.save_json(&out.join("policy.json"))?;
            if !o.checkpoints.is_empty() {
                let dir = out.join("checkpoints");
                manifest::create_dir(&dir)?;
                for (step, p) in &o.checkpoints {
                    p.save_json(&dir.join(format!("step_{step:08}.json")))?;
                }
            }
        }
        RunArtifacts::Reward(f) => {
            f.reward.save_json(&out.join("reward.json"))?;
            extra.insert("converged".into(), json!(f.converged));
            if let crate::env::GroundTruth::BradleyTerry(truth) = inputs.env.truth() {
                extra.insert("reward_difference_error".into(), json!(f.reward.max_difference_error(truth)));
            }
        }
    }
    let doc = json!({
        "command": "train",
        "tool": manifest::tool_version(),
        "config": serde_json::to_value(config).expect("config serializes"),
        "inputs": inputs.hashes,
        "steps_run": artifacts.steps_run(),
        "final": artifacts.metrics().last(),
        "result": extra,
    });
    manifest::write(&out.join("manifest.json"), &doc)
}

pub fn run(cli: &Cli, args: &TrainArgs) -> Result<i32> {
    let out = required(&cli.out, "out")?;
    let config_path = required(&cli.config, "config")?;
    let text = std::fs::read_to_string(&config_path).map_err(|e| LabError::io(&config_path, e))?;
    let config = load_run_config(&text, &config_path, args.method.as_deref(), cli.seed)?;
    let inputs = RunInputs::load(&args.data_dir)?;
    let artifacts = run_training(&config, &inputs)?;
    write_artifacts(&out, &config, &inputs, &artifacts)?;
    if let Some(last) = artifacts.metrics().last() {
        println!(
            "{} finished {} steps: loss {:.6}, exact_reward {:.6}, kl_to_ref {:.6}",
            config.method.as_str(),
            artifacts.steps_run(),
            last.loss_total,
            last.exact_reward,
            last.kl_to_ref
        );
    }
    Ok(EXIT_OK)
}

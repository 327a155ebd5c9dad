//! Plain gradient-descent training loops.
//!
//! * [`train_mpo`]: weighted preference term for the first
//!   `weighted_iter_num` iterations, unweighted afterwards, plus the
//!   reference and pretraining likelihood terms.
//! * [`train_baseline`]: DPO or IPO against a frozen reference policy.
//! * [`fit_bt_reward`]: Bradley-Terry reward fitting.
//! * [`fit_reference_policy`]: maximum-likelihood SFT on reference data.
//!
//! Full-batch mode (batch size 0) evaluates count-compressed datasets, which
//! is the same objective as the raw mean. Minibatches are drawn with
//! replacement from per-stream generators of the run seed.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{tally, Counted, PairSample, PreferenceSample};
use crate::env::{exact_expected_preference_reward, PreferenceEnv};
use crate::error::{LabError, Result};
use crate::losses::{self, LossTerms};
use crate::policy::{kl_divergence, TabularPolicy};
use crate::reward::RewardTable;
use crate::rng::{self, LabRng};
use crate::table::GradientTable;

/// Logits beyond this magnitude abort the run.
pub const LOGIT_GUARD: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mpo,
    Dpo,
    Ipo,
    BtReward,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mpo => "mpo",
            Method::Dpo => "dpo",
            Method::Ipo => "ipo",
            Method::BtReward => "bt-reward",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpo" => Ok(Method::Mpo),
            "dpo" => Ok(Method::Dpo),
            "ipo" => Ok(Method::Ipo),
            "bt-reward" => Ok(Method::BtReward),
            other => Err(LabError::Config(format!("unknown method {other:?}"))),
        }
    }
}

fn default_tau() -> f64 {
    1.0
}
fn default_step_size() -> f64 {
    0.1
}
fn default_eval_every() -> usize {
    100
}
fn default_grad_tolerance() -> f64 {
    1e-6
}

/// Run configuration. Batch sizes of 0 select full-batch evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    pub steps: usize,
    /// Iterations run with the weighted preference term (MPO only; required).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_iter_num: Option<usize>,
    #[serde(default)]
    pub pref_batch: usize,
    #[serde(default)]
    pub ref_batch: usize,
    #[serde(default)]
    pub pretrain_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Snapshot interval for checkpoints; 0 keeps only the final policy.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Reward fitting stops once the gradient max-norm falls below this.
    #[serde(default = "default_grad_tolerance")]
    pub grad_tolerance: f64,
}

impl TrainConfig {
    /// Config with defaults for everything but the method and step count.
    pub fn new(method: Method, steps: usize) -> Self {
        TrainConfig {
            method,
            beta: 0.0,
            gamma: 0.0,
            tau: default_tau(),
            step_size: default_step_size(),
            steps,
            weighted_iter_num: if method == Method::Mpo { Some(0) } else { None },
            pref_batch: 0,
            ref_batch: 0,
            pretrain_batch: 0,
            seed: 0,
            eval_every: default_eval_every(),
            checkpoint_every: 0,
            grad_tolerance: default_grad_tolerance(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size must be >= 0, got {}", self.step_size));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("beta and gamma must be nonnegative".into());
        }
        match self.method {
            Method::Mpo => match self.weighted_iter_num {
                None => return bad("mpo requires weighted_iter_num".into()),
                Some(w) if w > self.steps => {
                    return bad(format!("weighted_iter_num {w} exceeds steps {}", self.steps))
                }
                _ => {}
            },
            Method::Dpo if self.beta <= 0.0 => return bad("dpo requires beta > 0".into()),
            Method::Ipo if self.tau.is_nan() || self.tau <= 0.0 => return bad("ipo requires tau > 0".into()),
            _ => {}
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(1);
            LabError::parse("<config>", line, e.message())
        })?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// One evaluation point. Metrics that need an absent input (no environment,
/// no reference policy, no reference data) are NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_rm: f64,
    pub loss_ref: f64,
    pub loss_pretrain: f64,
    pub exact_reward: f64,
    pub kl_to_ref: f64,
    pub ref_loglik: f64,
    pub max_abs_logit: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_rm,loss_ref,loss_pretrain,exact_reward,kl_to_ref,ref_loglik,max_abs_logit";

#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub preferences: Vec<PreferenceSample>,
    pub reference: Vec<PairSample>,
    pub pretrain: Vec<PairSample>,
}

/// Read-only inputs used only for diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct Monitor<'a> {
    pub env: Option<&'a PreferenceEnv>,
    pub reference: Option<&'a TabularPolicy>,
    /// Records scored by `ref_loglik`.
    pub ref_data: &'a [PairSample],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub metrics: Vec<MetricsRecord>,
    /// `(step, policy)` snapshots every `checkpoint_every` steps.
    pub checkpoints: Vec<(usize, TabularPolicy)>,
    /// Updates actually applied (fewer than `steps` after early convergence).
    pub steps_run: usize,
}

struct Diagnostics {
    env: Option<PreferenceEnv>,
    reference: Option<TabularPolicy>,
    ref_tally: Vec<Counted<PairSample>>,
    kl_weights: Vec<f64>,
}

impl Diagnostics {
    fn new(monitor: &Monitor<'_>, shape: (usize, usize)) -> Result<Self> {
        if let Some(env) = monitor.env {
            if env.shape() != shape {
                return Err(LabError::Shape(format!("env {:?} vs policy {:?}", env.shape(), shape)));
            }
        }
        if let Some(r) = monitor.reference {
            if r.shape() != shape {
                return Err(LabError::Shape(format!("reference {:?} vs policy {:?}", r.shape(), shape)));
            }
        }
        let kl_weights = match monitor.env {
            Some(env) => env.rho().to_vec(),
            None => vec![1.0 / shape.0 as f64; shape.0],
        };
        Ok(Diagnostics {
            env: monitor.env.cloned(),
            reference: monitor.reference.cloned(),
            ref_tally: tally(monitor.ref_data),
            kl_weights,
        })
    }

    fn record(&self, step: usize, policy: &TabularPolicy, terms: LossTerms) -> Result<MetricsRecord> {
        let exact_reward = match &self.env {
            Some(env) => exact_expected_preference_reward(policy, env)?,
            None => f64::NAN,
        };
        let kl_to_ref = match &self.reference {
            Some(r) => kl_divergence(policy, r, &self.kl_weights)?,
            None => f64::NAN,
        };
        let ref_loglik = if self.ref_tally.is_empty() {
            f64::NAN
        } else {
            -losses::ref_reg_loss(policy, &self.ref_tally, 1.0)?.value
        };
        Ok(MetricsRecord {
            step,
            loss_total: terms.total(),
            loss_rm: terms.rm,
            loss_ref: terms.reference,
            loss_pretrain: terms.pretrain,
            exact_reward,
            kl_to_ref,
            ref_loglik,
            max_abs_logit: policy.max_abs_logit(),
        })
    }
}

/// Full tally or a with-replacement minibatch of `size` records.
struct Stream<T> {
    full: Vec<Counted<T>>,
    raw: Vec<T>,
    size: usize,
    rng: LabRng,
}

impl<T: Ord + Clone> Stream<T> {
    fn new(raw: &[T], size: usize, seed: u64, stream: u64) -> Self {
        Stream {
            full: if size == 0 { tally(raw) } else { Vec::new() },
            raw: raw.to_vec(),
            size,
            rng: rng::stream(seed, stream),
        }
    }

    fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    fn next_batch(&mut self) -> Vec<Counted<T>> {
        if self.size == 0 || self.raw.is_empty() {
            return self.full.clone();
        }
        let picks: Vec<T> = (0..self.size)
            .map(|_| self.raw[self.rng.random_range(0..self.raw.len())].clone())
            .collect();
        tally(&picks)
    }
}

fn guard(policy: &TabularPolicy, step: usize) -> Result<()> {
    for (k, v) in policy.logits().as_slice().iter().enumerate() {
        if !v.is_finite() || v.abs() > LOGIT_GUARD {
            let (c, r) = (k / policy.num_responses(), k % policy.num_responses());
            return Err(LabError::Divergence {
                step,
                detail: format!("logit[{c}][{r}] = {v} (guard {LOGIT_GUARD})"),
            });
        }
    }
    Ok(())
}

/// Shared descent loop. `gradient(policy, iter)` returns the update
/// direction for iteration `iter`; `terms(policy, iter)` the full-data loss
/// components reported at an evaluation point.
fn descend<G, L>(
    init: &TabularPolicy,
    config: &TrainConfig,
    diag: &Diagnostics,
    mut gradient: G,
    terms: L,
    stop_below: Option<f64>,
) -> Result<TrainOutcome>
where
    G: FnMut(&TabularPolicy, usize) -> Result<GradientTable>,
    L: Fn(&TabularPolicy, usize) -> Result<LossTerms>,
{
    guard(init, 0)?;
    let mut policy = init.clone();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut steps_run = config.steps;
    for iter in 0..config.steps {
        if iter % config.eval_every == 0 {
            metrics.push(diag.record(iter, &policy, terms(&policy, iter)?)?);
        }
        let g = gradient(&policy, iter)?;
        if let Some(tol) = stop_below {
            if g.max_abs() < tol {
                steps_run = iter;
                break;
            }
        }
        policy.logits_mut().add_scaled(&g, -config.step_size);
        guard(&policy, iter + 1)?;
        if config.checkpoint_every > 0 && (iter + 1) % config.checkpoint_every == 0 {
            checkpoints.push((iter + 1, policy.clone()));
        }
    }
    if metrics.last().map(|m| m.step) != Some(steps_run) {
        metrics.push(diag.record(steps_run, &policy, terms(&policy, steps_run)?)?);
    }
    Ok(TrainOutcome {
        policy,
        metrics,
        checkpoints,
        steps_run,
    })
}

fn check_method(config: &TrainConfig, allowed: &[Method]) -> Result<()> {
    config.validate()?;
    if !allowed.contains(&config.method) {
        return Err(LabError::Config(format!(
            "method {} not valid for this trainer",
            config.method.as_str()
        )));
    }
    Ok(())
}

/// MPO training: the preference gradient uses the weighted (cross-entropy)
/// form while `iter < weighted_iter_num` and the unweighted form afterwards;
/// the update is `theta -= step_size * (g_rm + g_ref + g_pretrain)`.
pub fn train_mpo(init: &TabularPolicy, data: &TrainingData, config: &TrainConfig, monitor: &Monitor<'_>) -> Result<TrainOutcome> {
    check_method(config, &[Method::Mpo])?;
    if data.preferences.is_empty() {
        return Err(LabError::Config("mpo needs a nonempty preference dataset".into()));
    }
    if config.beta > 0.0 && data.reference.is_empty() {
        return Err(LabError::Config("beta > 0 needs reference data".into()));
    }
    if config.gamma > 0.0 && data.pretrain.is_empty() {
        return Err(LabError::Config("gamma > 0 needs pretrain data".into()));
    }
    let weighted_until = config.weighted_iter_num.unwrap_or(0);
    let diag = Diagnostics::new(monitor, init.shape())?;
    let mut prefs = Stream::new(&data.preferences, config.pref_batch, config.seed, rng::MINIBATCH_PREFERENCES);
    let use_ref = config.beta > 0.0;
    let use_pre = config.gamma > 0.0;
    let mut refs = Stream::new(if use_ref { &data.reference } else { &[] }, config.ref_batch, config.seed, rng::MINIBATCH_REFERENCE);
    let mut pres = Stream::new(if use_pre { &data.pretrain } else { &[] }, config.pretrain_batch, config.seed, rng::MINIBATCH_PRETRAIN);
    let full_pref = tally(&data.preferences);
    let full_ref = if use_ref { tally(&data.reference) } else { Vec::new() };
    let full_pre = if use_pre { tally(&data.pretrain) } else { Vec::new() };
    let (beta, gamma) = (config.beta, config.gamma);
    descend(
        init,
        config,
        &diag,
        |policy, iter| {
            let weighted = iter < weighted_until;
            let pb = prefs.next_batch();
            let mut g = if weighted {
                losses::mpo_rm_weighted_loss(policy, &pb)?.gradient
            } else {
                losses::mpo_rm_loss(policy, &pb)?.gradient
            };
            if !refs.is_empty() {
                g.add_scaled(&losses::ref_reg_loss(policy, &refs.next_batch(), beta)?.gradient, 1.0);
            }
            if !pres.is_empty() {
                g.add_scaled(&losses::pretrain_reg_loss(policy, &pres.next_batch(), gamma)?.gradient, 1.0);
            }
            Ok(g)
        },
        |policy, iter| {
            let weighted = iter < weighted_until;
            losses::mpo_total_loss(policy, &full_pref, &full_ref, &full_pre, beta, gamma, weighted).map(|(_, t)| t)
        },
        None,
    )
}

/// DPO or IPO descent against the frozen `reference`.
pub fn train_baseline(
    init: &TabularPolicy,
    reference: &TabularPolicy,
    dataset: &[PreferenceSample],
    config: &TrainConfig,
    monitor: &Monitor<'_>,
) -> Result<TrainOutcome> {
    check_method(config, &[Method::Dpo, Method::Ipo])?;
    if dataset.is_empty() {
        return Err(LabError::Config("baseline needs a nonempty preference dataset".into()));
    }
    init.logits().ensure_same_shape(reference.logits())?;
    let diag = Diagnostics::new(monitor, init.shape())?;
    let mut prefs = Stream::new(dataset, config.pref_batch, config.seed, rng::MINIBATCH_PREFERENCES);
    let full = tally(dataset);
    let method = config.method;
    let (beta, tau) = (config.beta, config.tau);
    let loss = move |policy: &TabularPolicy, batch: &[Counted<PreferenceSample>]| match method {
        Method::Dpo => losses::dpo_loss(policy, reference, batch, beta),
        _ => losses::ipo_loss(policy, reference, batch, tau),
    };
    descend(
        init,
        config,
        &diag,
        |policy, _| Ok(loss(policy, &prefs.next_batch())?.gradient),
        |policy, _| {
            Ok(LossTerms {
                rm: loss(policy, &full)?.value,
                ..LossTerms::default()
            })
        },
        None,
    )
}

/// Result of Bradley-Terry fitting. `metrics` reuses the common record with
/// `loss_rm` holding the reward loss and `max_abs_logit` the largest
/// absolute reward.
#[derive(Debug, Clone)]
pub struct RewardFit {
    pub reward: RewardTable,
    pub metrics: Vec<MetricsRecord>,
    pub steps_run: usize,
    pub converged: bool,
}

/// Gradient descent on the Bradley-Terry loss; stops once the (full or
/// minibatch) gradient max-norm is below `grad_tolerance`.
pub fn fit_bt_reward(init: &RewardTable, dataset: &[PreferenceSample], config: &TrainConfig) -> Result<RewardFit> {
    check_method(config, &[Method::BtReward])?;
    if dataset.is_empty() {
        return Err(LabError::Config("reward fitting needs a nonempty preference dataset".into()));
    }
    let params = TabularPolicy::from_table(init.table().clone())?;
    let diag = Diagnostics::new(&Monitor::default(), params.shape())?;
    let mut prefs = Stream::new(dataset, config.pref_batch, config.seed, rng::MINIBATCH_PREFERENCES);
    let full = tally(dataset);
    let as_reward = |p: &TabularPolicy| RewardTable::from_table(p.logits().clone());
    let out = descend(
        &params,
        config,
        &diag,
        |p, _| Ok(losses::bt_reward_loss(&as_reward(p)?, &prefs.next_batch())?.1),
        |p, _| {
            Ok(LossTerms {
                rm: losses::bt_reward_loss(&as_reward(p)?, &full)?.0,
                ..LossTerms::default()
            })
        },
        Some(config.grad_tolerance),
    )?;
    Ok(RewardFit {
        reward: as_reward(&out.policy)?,
        metrics: out.metrics,
        converged: out.steps_run < config.steps,
        steps_run: out.steps_run,
    })
}

#[derive(Debug, Clone)]
pub struct SftFit {
    pub policy: TabularPolicy,
    pub steps_run: usize,
    pub grad_max_norm: f64,
    pub converged: bool,
}

/// Maximum-likelihood fit of a policy to `(x, y)` records by full-batch
/// gradient descent from the uniform policy, stopping when the gradient
/// max-norm drops below `tolerance`.
pub fn fit_reference_policy(
    data: &[PairSample],
    shape: (usize, usize),
    step_size: f64,
    max_steps: usize,
    tolerance: f64,
) -> Result<SftFit> {
    if data.is_empty() {
        return Err(LabError::EmptyInput("reference dataset"));
    }
    let counts = tally(data);
    let mut policy = TabularPolicy::uniform(shape.0, shape.1);
    let mut grad_max_norm = f64::INFINITY;
    for step in 0..max_steps {
        let g = losses::ref_reg_loss(&policy, &counts, 1.0)?.gradient;
        grad_max_norm = g.max_abs();
        if grad_max_norm < tolerance {
            return Ok(SftFit {
                policy,
                steps_run: step,
                grad_max_norm,
                converged: true,
            });
        }
        policy.logits_mut().add_scaled(&g, -step_size);
        guard(&policy, step + 1)?;
    }
    Ok(SftFit {
        policy,
        steps_run: max_steps,
        grad_max_norm,
        converged: false,
    })
}

pub fn write_metrics_csv(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| LabError::io(path, e.into()))?;
    for m in metrics {
        w.serialize(m).map_err(|e| LabError::io(path, e.into()))?;
    }
    if metrics.is_empty() {
        drop(w);
        std::fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| LabError::io(path, e))?;
        return Ok(());
    }
    w.flush().map_err(|e| LabError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::io(path, e.into()))?;
    let header = r.headers().map_err(|e| LabError::io(path, e.into()))?.iter().collect::<Vec<_>>().join(",");
    if header != METRICS_HEADER {
        return Err(LabError::parse(path, 1, format!("unexpected header {header:?}")));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| LabError::parse(path, i + 2, e)))
        .collect()
}

pub fn write_metrics_jsonl(path: &Path, metrics: &[MetricsRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for m in metrics {
        serde_json::to_writer(&mut out, m).expect("metrics serialize");
        out.write_all(b"\n").map_err(|e| LabError::io(path, e))?;
    }
    out.flush().map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{random, GroundTruth, PairWeight};
    use crate::table::Table;

    fn disjoint_pairs_env(p: &[f64]) -> PreferenceEnv {
        let v = 2 * p.len();
        let mut t = Table::zeros(v, v);
        let mut mu = Vec::new();
        for (k, &pk) in p.iter().enumerate() {
            t.set(2 * k, 2 * k + 1, pk);
            mu.push(PairWeight { a: 2 * k, b: 2 * k + 1, weight: 1.0 / p.len() as f64 });
        }
        PreferenceEnv::new(vec![1.0], v, vec![mu], GroundTruth::Free(vec![t])).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(Method::Mpo, 10);
        assert!(c.validate().is_ok());
        c.weighted_iter_num = Some(11);
        assert!(c.validate().is_err());
        c.weighted_iter_num = None;
        assert!(c.validate().is_err());
        let mut d = TrainConfig::new(Method::Dpo, 10);
        assert!(d.validate().is_err());
        d.beta = 0.1;
        assert!(d.validate().is_ok());
        assert!(TrainConfig::new(Method::Ipo, 0).validate().is_err());
    }

    #[test]
    fn toml_round_trip_prints_defaults() {
        let c = TrainConfig::from_toml_str("method = \"mpo\"\nsteps = 5\nweighted_iter_num = 2\n").unwrap();
        assert_eq!(c.step_size, 0.1);
        let text = c.to_toml_string();
        assert!(text.contains("step_size"));
        assert!(text.contains("eval_every"));
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), c);
        match TrainConfig::from_toml_str("method = \"mpo\"\n\nsteps = \"x\"\n") {
            Err(LabError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_step_size_keeps_init() {
        let mut r = rng::stream(1, 0);
        let init = random::policy(&mut r, 1, 4, 1.0);
        let env = disjoint_pairs_env(&[1.0, 1.0]);
        let data = TrainingData {
            preferences: crate::env::sample_preference_dataset(&env, 100, 1).unwrap(),
            ..TrainingData::default()
        };
        let mut cfg = TrainConfig::new(Method::Mpo, 1);
        cfg.step_size = 0.0;
        let out = train_mpo(&init, &data, &cfg, &Monitor::default()).unwrap();
        assert_eq!(out.policy, init);
        assert_eq!(out.metrics.len(), 2);
    }

    #[test]
    fn full_batch_reward_increases_monotonically() {
        let env = disjoint_pairs_env(&[1.0, 1.0, 1.0]);
        let data = TrainingData {
            preferences: crate::env::sample_preference_dataset(&env, 3000, 2).unwrap(),
            ..TrainingData::default()
        };
        let mut cfg = TrainConfig::new(Method::Mpo, 2000);
        cfg.eval_every = 50;
        let init = TabularPolicy::uniform(1, 6);
        let out = train_mpo(&init, &data, &cfg, &Monitor { env: Some(&env), ..Monitor::default() }).unwrap();
        for w in out.metrics.windows(2) {
            assert!(w[1].exact_reward > w[0].exact_reward, "{:?}", w);
        }
    }

    #[test]
    fn metrics_components_sum_to_total() {
        let mut r = rng::stream(3, 0);
        let env = random::env(&mut r, 2, 4, false);
        let reference = random::policy(&mut r, 2, 4, 1.0);
        let data = TrainingData {
            preferences: crate::env::sample_preference_dataset(&env, 500, 3).unwrap(),
            reference: crate::env::sample_pair_dataset(&env, &reference, 300, 3, rng::REFERENCE).unwrap(),
            pretrain: crate::env::sample_pair_dataset(&env, &reference, 200, 3, rng::PRETRAIN).unwrap(),
        };
        let mut cfg = TrainConfig::new(Method::Mpo, 200);
        cfg.beta = 0.3;
        cfg.gamma = 0.2;
        cfg.weighted_iter_num = Some(100);
        cfg.pref_batch = 32;
        cfg.ref_batch = 16;
        cfg.pretrain_batch = 16;
        cfg.eval_every = 20;
        cfg.checkpoint_every = 50;
        let monitor = Monitor { env: Some(&env), reference: Some(&reference), ref_data: &data.reference };
        let a = train_mpo(&reference, &data, &cfg, &monitor).unwrap();
        for m in &a.metrics {
            assert!((m.loss_total - (m.loss_rm + m.loss_ref + m.loss_pretrain)).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&m.exact_reward));
            assert!(m.kl_to_ref >= 0.0);
        }
        assert_eq!(a.checkpoints.len(), 4);
        let b = train_mpo(&reference, &data, &cfg, &monitor).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(
            a.metrics.iter().map(|m| m.loss_total.to_bits()).collect::<Vec<_>>(),
            b.metrics.iter().map(|m| m.loss_total.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn phase_switch_uses_weighted_form_first() {
        // After one update from uniform, the weighted step on an always-preferred
        // pair has gradient 1/2 per logit; the unweighted step has 1/4.
        let env = disjoint_pairs_env(&[1.0]);
        let data = TrainingData {
            preferences: vec![PreferenceSample::new(0, 0, 1, true)],
            ..TrainingData::default()
        };
        let init = TabularPolicy::uniform(1, 2);
        let mut cfg = TrainConfig::new(Method::Mpo, 1);
        cfg.step_size = 1.0;
        cfg.weighted_iter_num = Some(1);
        let w = train_mpo(&init, &data, &cfg, &Monitor { env: Some(&env), ..Monitor::default() }).unwrap();
        assert!((w.policy.logits().get(0, 0) - 0.5).abs() < 1e-15);
        cfg.weighted_iter_num = Some(0);
        let u = train_mpo(&init, &data, &cfg, &Monitor::default()).unwrap();
        assert!((u.policy.logits().get(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn divergence_guard_trips() {
        let data = TrainingData {
            preferences: vec![PreferenceSample::new(0, 0, 1, true)],
            ..TrainingData::default()
        };
        let mut cfg = TrainConfig::new(Method::Mpo, 10);
        cfg.weighted_iter_num = Some(10);
        cfg.step_size = 1e4;
        let err = train_mpo(&TabularPolicy::uniform(1, 2), &data, &cfg, &Monitor::default()).unwrap_err();
        assert!(matches!(err, LabError::Divergence { step: 1, .. }));
    }

    #[test]
    fn balanced_dpo_data_is_a_fixed_point() {
        let mut r = rng::stream(4, 0);
        let reference = random::policy(&mut r, 2, 3, 1.0);
        let mut data = Vec::new();
        for x in 0..2 {
            for a in 0..3 {
                for b in (a + 1)..3 {
                    data.push(PreferenceSample::new(x, a, b, true));
                    data.push(PreferenceSample::new(x, a, b, false));
                }
            }
        }
        let mut cfg = TrainConfig::new(Method::Dpo, 100);
        cfg.beta = 0.5;
        let out = train_baseline(&reference, &reference, &data, &cfg, &Monitor::default()).unwrap();
        assert!(out.policy.logits().max_abs_diff(reference.logits()) < 1e-8);
    }

    #[test]
    fn balanced_bt_data_converges_to_zero_differences() {
        let data: Vec<_> = (0..4)
            .flat_map(|k| [PreferenceSample::new(0, k % 3, 3, true), PreferenceSample::new(0, k % 3, 3, false)])
            .collect();
        let mut r = rng::stream(5, 0);
        let init = RewardTable::from_table(random::policy(&mut r, 1, 4, 1.0).logits().clone()).unwrap();
        let mut cfg = TrainConfig::new(Method::BtReward, 200_000);
        cfg.step_size = 1.0;
        let fit = fit_bt_reward(&init, &data, &cfg).unwrap();
        assert!(fit.converged);
        for y in 0..3 {
            assert!((fit.reward.get(0, y) - fit.reward.get(0, 3)).abs() < 1e-4);
        }
    }

    #[test]
    fn sft_recovers_empirical_distribution() {
        let data = vec![
            PairSample::new(0, 0),
            PairSample::new(0, 0),
            PairSample::new(0, 1),
            PairSample::new(0, 2),
            PairSample::new(1, 0),
            PairSample::new(1, 1),
            PairSample::new(1, 2),
        ];
        let fit = fit_reference_policy(&data, (2, 3), 1.0, 100_000, 1e-8).unwrap();
        assert!(fit.converged);
        let p0 = fit.policy.probs(0).unwrap();
        assert!((p0[0] - 0.5).abs() < 1e-6 && (p0[2] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = MetricsRecord {
            step: 3,
            loss_total: 0.1,
            loss_rm: 0.05,
            loss_ref: 0.05,
            loss_pretrain: 0.0,
            exact_reward: 0.75,
            kl_to_ref: 1.0 / 3.0,
            ref_loglik: -1.2,
            max_abs_logit: 4.0,
        };
        write_metrics_csv(&path, &[m]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(read_metrics_csv(&path).unwrap(), vec![m]);
    }
}

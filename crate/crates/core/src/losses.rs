//! Every preference objective as a `(value, analytic gradient)` pair over a
//! tabular policy, plus the closed-form constructions of KL-regularized
//! reward maximization.
//!
//! All batch losses are weighted means over [`Weighted`] records, so raw
//! slices and count-compressed batches evaluate the same objective. Per
//! record, every pairwise loss depends on the policy only through the logit
//! gap `d = theta[x][y_w] - theta[x][y_l]`, so its gradient touches exactly
//! two entries of row `x` with opposite signs.

use crate::dataset::{validate_pairs, validate_preferences, PairSample, PreferenceSample, Weighted};
use crate::env::PreferenceEnv;
use crate::error::{LabError, Result};
use crate::math::{log_sigmoid, sigmoid};
use crate::parallel::chunked_reduce;
use crate::policy::TabularPolicy;
use crate::reward::RewardTable;
use crate::table::{GradientTable, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub gradient: GradientTable,
}

/// Component values of the three-term MPO loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub rm: f64,
    pub reference: f64,
    pub pretrain: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.rm + self.reference + self.pretrain
    }
}

struct Acc {
    value: f64,
    weight: f64,
    grad: Table,
}

/// Weighted mean of a per-record loss whose gradient lives on the gap of a
/// single pair. `per_record(item, table)` returns `(value, d value / d gap,
/// (x, a, b))` for the gap `table[x][a] - table[x][b]`.
fn pair_gap_loss<B, F>(shape: (usize, usize), batch: &[B], per_record: F) -> Result<LossReport>
where
    B: Weighted<PreferenceSample>,
    F: Fn(&PreferenceSample) -> (f64, f64) + Sync + Send,
{
    if batch.is_empty() {
        return Err(LabError::EmptyInput("preference batch"));
    }
    let acc = chunked_reduce(
        batch,
        || Acc {
            value: 0.0,
            weight: 0.0,
            grad: Table::zeros(shape.0, shape.1),
        },
        |acc, rec| {
            let w = rec.weight();
            let s = rec.item();
            let (v, dv_dgap) = per_record(s);
            acc.value += w * v;
            acc.weight += w;
            acc.grad.add(s.x, s.y_w, w * dv_dgap);
            acc.grad.add(s.x, s.y_l, -w * dv_dgap);
        },
        |acc, part| {
            acc.value += part.value;
            acc.weight += part.weight;
            acc.grad.add_scaled(&part.grad, 1.0);
        },
    );
    finish(acc)
}

fn finish(mut acc: Acc) -> Result<LossReport> {
    if acc.weight <= 0.0 {
        return Err(LabError::EmptyInput("batch has zero total weight"));
    }
    acc.grad.scale(1.0 / acc.weight);
    Ok(LossReport {
        value: acc.value / acc.weight,
        gradient: acc.grad,
    })
}

fn items<T: Copy, B: Weighted<T>>(batch: &[B]) -> Vec<T> {
    batch.iter().map(|b| *b.item()).collect()
}

fn check_prefs<B: Weighted<PreferenceSample>>(batch: &[B], shape: (usize, usize)) -> Result<()> {
    if batch.iter().any(|b| b.item().x >= shape.0 || b.item().y_w >= shape.1 || b.item().y_l >= shape.1 || b.item().y_w == b.item().y_l) {
        validate_preferences(&items(batch), shape)?;
    }
    Ok(())
}

fn check_pairs<B: Weighted<PairSample>>(batch: &[B], shape: (usize, usize)) -> Result<()> {
    if batch.iter().any(|b| b.item().x >= shape.0 || b.item().y >= shape.1) {
        validate_pairs(&items(batch), shape)?;
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(LabError::Config(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(LabError::Config(format!("{name} must be nonnegative and finite, got {v}")));
    }
    Ok(())
}

/// Unweighted preference-maximization loss: the negative expected
/// preference reward `-(I pi_w + (1 - I) pi_l)` of the local pairwise
/// distribution. Its gradient carries the weight `pi_w * pi_l`, which
/// vanishes once a pair is saturated in either direction.
pub fn mpo_rm_loss<B: Weighted<PreferenceSample>>(policy: &TabularPolicy, batch: &[B]) -> Result<LossReport> {
    check_prefs(batch, policy.shape())?;
    pair_gap_loss(policy.shape(), batch, |s| {
        let d = policy.logit_gap(s.x, s.y_w, s.y_l);
        let (pw, pl) = (sigmoid(d), sigmoid(-d));
        let i = s.indicator();
        let value = -(i * pw + (1.0 - i) * pl);
        (value, -(2.0 * i - 1.0) * pw * pl)
    })
}

/// Cross-entropy (preference-matching) form. Its gradient weights the
/// log-ratio direction by the probability the policy gives the losing order.
pub fn mpo_rm_weighted_loss<B: Weighted<PreferenceSample>>(
    policy: &TabularPolicy,
    batch: &[B],
) -> Result<LossReport> {
    check_prefs(batch, policy.shape())?;
    pair_gap_loss(policy.shape(), batch, |s| {
        let d = policy.logit_gap(s.x, s.y_w, s.y_l);
        let i = s.indicator();
        let value = -(i * log_sigmoid(d) + (1.0 - i) * log_sigmoid(-d));
        (value, -(i * sigmoid(-d) - (1.0 - i) * sigmoid(d)))
    })
}

/// `-weight * mean log pi(y|x)` over pair records.
fn likelihood_loss<B: Weighted<PairSample>>(policy: &TabularPolicy, batch: &[B], weight: f64) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(LabError::EmptyInput("pair batch"));
    }
    check_pairs(batch, policy.shape())?;
    let (c, v) = policy.shape();
    let counts = chunked_reduce(
        batch,
        || Table::zeros(c, v),
        |t, rec| t.add(rec.item().x, rec.item().y, rec.weight()),
        |t, part| t.add_scaled(&part, 1.0),
    );
    let total: f64 = counts.as_slice().iter().sum();
    if total <= 0.0 {
        return Err(LabError::EmptyInput("batch has zero total weight"));
    }
    let mut value = 0.0;
    let mut grad = Table::zeros(c, v);
    for x in 0..c {
        let row_counts = counts.row(x);
        let n_x: f64 = row_counts.iter().sum();
        if n_x == 0.0 {
            continue;
        }
        let logp = policy.log_probs_unchecked(x);
        for y in 0..v {
            if row_counts[y] > 0.0 {
                value += row_counts[y] * logp[y];
            }
            grad.set(x, y, -weight * (row_counts[y] - n_x * logp[y].exp()) / total);
        }
    }
    Ok(LossReport {
        value: -weight * value / total,
        gradient: grad,
    })
}

/// Reference-data regularizer: negative log-likelihood of the policy on
/// reference-distributed samples, scaled by `beta`.
pub fn ref_reg_loss<B: Weighted<PairSample>>(policy: &TabularPolicy, batch: &[B], beta: f64) -> Result<LossReport> {
    check_nonneg("beta", beta)?;
    likelihood_loss(policy, batch, beta)
}

/// Pretraining-data regularizer; same functional form as [`ref_reg_loss`].
pub fn pretrain_reg_loss<B: Weighted<PairSample>>(policy: &TabularPolicy, batch: &[B], gamma: f64) -> Result<LossReport> {
    check_nonneg("gamma", gamma)?;
    likelihood_loss(policy, batch, gamma)
}

/// Full MPO loss: preference term (weighted or unweighted) plus both
/// likelihood regularizers. A regularizer batch may be empty only when its
/// weight is zero.
pub fn mpo_total_loss<P, R, T>(
    policy: &TabularPolicy,
    pref_batch: &[P],
    ref_batch: &[R],
    pretrain_batch: &[T],
    beta: f64,
    gamma: f64,
    weighted: bool,
) -> Result<(LossReport, LossTerms)>
where
    P: Weighted<PreferenceSample>,
    R: Weighted<PairSample>,
    T: Weighted<PairSample>,
{
    check_nonneg("beta", beta)?;
    check_nonneg("gamma", gamma)?;
    if beta > 0.0 && ref_batch.is_empty() {
        return Err(LabError::Config("beta > 0 requires a nonempty reference batch".into()));
    }
    if gamma > 0.0 && pretrain_batch.is_empty() {
        return Err(LabError::Config("gamma > 0 requires a nonempty pretrain batch".into()));
    }
    let mut report = if weighted {
        mpo_rm_weighted_loss(policy, pref_batch)?
    } else {
        mpo_rm_loss(policy, pref_batch)?
    };
    let mut terms = LossTerms {
        rm: report.value,
        ..LossTerms::default()
    };
    if !ref_batch.is_empty() {
        let r = ref_reg_loss(policy, ref_batch, beta)?;
        terms.reference = r.value;
        report.gradient.add_scaled(&r.gradient, 1.0);
    }
    if !pretrain_batch.is_empty() {
        let p = pretrain_reg_loss(policy, pretrain_batch, gamma)?;
        terms.pretrain = p.value;
        report.gradient.add_scaled(&p.gradient, 1.0);
    }
    report.value = terms.total();
    Ok((report, terms))
}

/// `log pi(a|x) - log pi(b|x) - (log ref(a|x) - log ref(b|x))`: the
/// log-ratio gap shared by DPO and IPO.
#[inline]
fn ratio_gap(policy: &TabularPolicy, reference: &TabularPolicy, x: usize, a: usize, b: usize) -> f64 {
    policy.logit_gap(x, a, b) - reference.logit_gap(x, a, b)
}

fn check_same_shape(policy: &TabularPolicy, reference: &TabularPolicy) -> Result<()> {
    policy.logits().ensure_same_shape(reference.logits())
}

/// DPO negative log-likelihood with implicit reward `beta log(pi / ref)`.
pub fn dpo_loss<B: Weighted<PreferenceSample>>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[B],
    beta: f64,
) -> Result<LossReport> {
    check_positive("beta", beta)?;
    check_same_shape(policy, reference)?;
    check_prefs(batch, policy.shape())?;
    pair_gap_loss(policy.shape(), batch, |s| {
        let m = beta * ratio_gap(policy, reference, s.x, s.y_w, s.y_l);
        let i = s.indicator();
        let value = -(i * log_sigmoid(m) + (1.0 - i) * log_sigmoid(-m));
        (value, -beta * (i * sigmoid(-m) - (1.0 - i) * sigmoid(m)))
    })
}

/// `h(x, a, b)`: log-ratio gap of `a` over `b` relative to the reference.
/// Antisymmetric: `h(x, a, b) = -h(x, b, a)`.
pub fn ipo_h(policy: &TabularPolicy, reference: &TabularPolicy, x: usize, a: usize, b: usize) -> Result<f64> {
    check_same_shape(policy, reference)?;
    policy.check_pair(x, a, b)?;
    Ok(ratio_gap(policy, reference, x, a, b))
}

/// IPO squared loss. Each record regresses the margin of the preferred
/// response, `h(x, winner, loser)`, onto `1 / (2 tau)`.
pub fn ipo_loss<B: Weighted<PreferenceSample>>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    batch: &[B],
    tau: f64,
) -> Result<LossReport> {
    check_positive("tau", tau)?;
    check_same_shape(policy, reference)?;
    check_prefs(batch, policy.shape())?;
    let target = 0.5 / tau;
    pair_gap_loss(policy.shape(), batch, |s| {
        let h = ratio_gap(policy, reference, s.x, s.y_w, s.y_l);
        let sign = 2.0 * s.indicator() - 1.0;
        let resid = sign * h - target;
        (resid * resid, 2.0 * resid * sign)
    })
}

/// Bradley-Terry negative log-likelihood of a reward table, with its
/// gradient over reward entries.
pub fn bt_reward_loss<B: Weighted<PreferenceSample>>(reward: &RewardTable, batch: &[B]) -> Result<(f64, Table)> {
    check_prefs(batch, reward.shape())?;
    let report = pair_gap_loss(reward.shape(), batch, |s| {
        let delta = reward.get(s.x, s.y_w) - reward.get(s.x, s.y_l);
        let i = s.indicator();
        let value = -(i * log_sigmoid(delta) + (1.0 - i) * log_sigmoid(-delta));
        (value, sigmoid(delta) - i)
    })?;
    Ok((report.value, report.gradient))
}

/// Maximizer of `E[r] - beta KL(pi || ref)` in the tabular case:
/// `pi(y|x) ∝ ref(y|x) exp(r(x,y) / beta)`.
pub fn optimal_policy_closed_form(reference: &TabularPolicy, reward: &RewardTable, beta: f64) -> Result<TabularPolicy> {
    check_positive("beta", beta)?;
    reference.logits().ensure_same_shape(reward.table())?;
    let (c, v) = reference.shape();
    let mut logits = Table::zeros(c, v);
    for x in 0..c {
        let lr = reference.log_probs_unchecked(x);
        for y in 0..v {
            logits.set(x, y, lr[y] + reward.get(x, y) / beta);
        }
    }
    TabularPolicy::from_table(logits)
}

/// `beta log(pi / ref)`, i.e. the implied reward without the per-context
/// `beta log Z(x)` constant.
pub fn implicit_reward(policy: &TabularPolicy, reference: &TabularPolicy, beta: f64) -> Result<RewardTable> {
    check_positive("beta", beta)?;
    check_same_shape(policy, reference)?;
    let (c, v) = policy.shape();
    let mut out = Table::zeros(c, v);
    for x in 0..c {
        let lp = policy.log_probs_unchecked(x);
        let lr = reference.log_probs_unchecked(x);
        for y in 0..v {
            out.set(x, y, beta * (lp[y] - lr[y]));
        }
    }
    RewardTable::from_table(out)
}

/// Exact `sum_x w(x) sum_y pi(y|x) [r(x,y) - beta log(pi(y|x) / ref(y|x))]`.
pub fn kl_regularized_objective(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    reward: &RewardTable,
    context_weights: &[f64],
    beta: f64,
) -> Result<f64> {
    check_same_shape(policy, reference)?;
    policy.logits().ensure_same_shape(reward.table())?;
    if context_weights.len() != policy.num_contexts() {
        return Err(LabError::Shape("context weights".into()));
    }
    let mut total = 0.0;
    for (x, &w) in context_weights.iter().enumerate() {
        let lp = policy.log_probs_unchecked(x);
        let lr = reference.log_probs_unchecked(x);
        let row: f64 = (0..policy.num_responses())
            .map(|y| {
                let p = lp[y].exp();
                if p == 0.0 {
                    0.0
                } else {
                    p * (reward.get(x, y) - beta * (lp[y] - lr[y]))
                }
            })
            .sum();
        total += w * row;
    }
    Ok(total)
}

/// Exactly enumerated PPO-ptx objective: KL-regularized expected reward
/// under `rho` plus `gamma` times the mean log-likelihood of the pretrain
/// records. Diagnostic only.
#[allow(clippy::too_many_arguments)]
pub fn ppo_ptx_objective_exact<B: Weighted<PairSample>>(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    reward: &RewardTable,
    env: &PreferenceEnv,
    beta: f64,
    gamma: f64,
    pretrain_batch: &[B],
) -> Result<f64> {
    check_nonneg("beta", beta)?;
    check_nonneg("gamma", gamma)?;
    if policy.shape() != env.shape() {
        return Err(LabError::Shape("policy vs env".into()));
    }
    let base = kl_regularized_objective(policy, reference, reward, env.rho(), beta)?;
    if gamma == 0.0 && pretrain_batch.is_empty() {
        return Ok(base);
    }
    // -gamma * mean log pi
    let nll = pretrain_reg_loss(policy, pretrain_batch, gamma)?.value;
    Ok(base - nll)
}

/// Every loss with an analytic gradient. The finite-difference harness
/// iterates this list; adding a variant without registering its evaluator
/// fails to compile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    MpoRm,
    MpoRmWeighted,
    RefReg,
    PretrainReg,
    MpoTotal,
    Dpo,
    Ipo,
    BtReward,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::MpoRm,
        LossKind::MpoRmWeighted,
        LossKind::RefReg,
        LossKind::PretrainReg,
        LossKind::MpoTotal,
        LossKind::Dpo,
        LossKind::Ipo,
        LossKind::BtReward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::MpoRm => "mpo_rm",
            LossKind::MpoRmWeighted => "mpo_rm_weighted",
            LossKind::RefReg => "ref_reg",
            LossKind::PretrainReg => "pretrain_reg",
            LossKind::MpoTotal => "mpo_total",
            LossKind::Dpo => "dpo",
            LossKind::Ipo => "ipo",
            LossKind::BtReward => "bt_reward",
        }
    }
}

/// Inputs shared by every registered loss.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub reference: TabularPolicy,
    pub prefs: Vec<PreferenceSample>,
    pub ref_pairs: Vec<PairSample>,
    pub pretrain_pairs: Vec<PairSample>,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl LossInstance {
    /// Evaluate `kind` with the logits of `params` as the free parameters.
    /// For the reward loss the logit table is read as a reward table.
    pub fn evaluate(&self, kind: LossKind, params: &TabularPolicy) -> Result<LossReport> {
        match kind {
            LossKind::MpoRm => mpo_rm_loss(params, &self.prefs),
            LossKind::MpoRmWeighted => mpo_rm_weighted_loss(params, &self.prefs),
            LossKind::RefReg => ref_reg_loss(params, &self.ref_pairs, self.beta),
            LossKind::PretrainReg => pretrain_reg_loss(params, &self.pretrain_pairs, self.gamma),
            LossKind::MpoTotal => mpo_total_loss(
                params,
                &self.prefs,
                &self.ref_pairs,
                &self.pretrain_pairs,
                self.beta,
                self.gamma,
                false,
            )
            .map(|(r, _)| r),
            LossKind::Dpo => dpo_loss(params, &self.reference, &self.prefs, self.beta),
            LossKind::Ipo => ipo_loss(params, &self.reference, &self.prefs, self.tau),
            LossKind::BtReward => {
                let reward = RewardTable::from_table(params.logits().clone())?;
                let (value, gradient) = bt_reward_loss(&reward, &self.prefs)?;
                Ok(LossReport { value, gradient })
            }
        }
    }
}

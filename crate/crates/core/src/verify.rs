//! Independent oracles for the analytic paths in `losses` and `env`.
//!
//! Nothing here calls the analytic gradient code it checks: finite
//! differences perturb logits and re-evaluate values only, and the
//! importance-sampling identity is re-derived from `grad_log_prob` and the
//! ratio form of the pairwise distribution.

use rand::Rng;
use serde::Serialize;

use crate::dataset::{PairSample, PreferenceSample};
use crate::env::{self, exact_preference_reward_gradient, PreferenceEnv};
use crate::error::{LabError, Result};
use crate::losses::{self, LossInstance, LossKind};
use crate::parallel::map_indexed;
use crate::policy::TabularPolicy;
use crate::reward::RewardTable;
use crate::rng::{self, LabRng};
use crate::table::{GradientTable, Table};

/// Central-difference gradient of `objective` at `policy`, one coordinate
/// at a time.
pub fn finite_diff_gradient<F>(objective: F, policy: &TabularPolicy, step: f64) -> Result<GradientTable>
where
    F: Fn(&TabularPolicy) -> Result<f64> + Sync + Send,
{
    if step.is_nan() || step <= 0.0 {
        return Err(LabError::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (c, v) = policy.shape();
    let entries = map_indexed(c * v, |k| -> Result<f64> {
        let mut plus = policy.clone();
        plus.logits_mut().as_mut_slice()[k] += step;
        let mut minus = policy.clone();
        minus.logits_mut().as_mut_slice()[k] -= step;
        let fp = objective(&plus)?;
        let fm = objective(&minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(LabError::OracleFailure(format!(
                "objective not finite around coordinate {k}: {fp}, {fm}"
            )));
        }
        Ok((fp - fm) / (2.0 * step))
    });
    let mut g = Table::zeros(c, v);
    for (slot, e) in g.as_mut_slice().iter_mut().zip(entries) {
        *slot = e?;
    }
    Ok(g)
}

/// `||a - b||_inf / max(1, ||a||_inf)`.
pub fn relative_error(analytic: &GradientTable, reference: &GradientTable) -> f64 {
    analytic.max_abs_diff(reference) / analytic.max_abs().max(1.0)
}

/// Pairwise preference from the ratio form `pi_a / (pi_a + pi_b)`.
fn ratio_pref(probs: &[f64], a: usize, b: usize) -> f64 {
    probs[a] / (probs[a] + probs[b])
}

/// Gradient of `pi^p(a over b | x)` via `grad_log_prob` composition:
/// `pi^p_a (1 - pi^p_a) (grad log pi_a - grad log pi_b)`.
fn grad_pairwise(policy: &TabularPolicy, x: usize, a: usize, b: usize) -> Result<GradientTable> {
    let probs = policy.probs(x)?;
    let pa = ratio_pref(&probs, a, b);
    let mut g = policy.grad_log_prob(x, a)?;
    g.add_scaled(&policy.grad_log_prob(x, b)?, -1.0);
    g.scale(pa * (1.0 - pa));
    Ok(g)
}

/// Exact expectation of the per-record estimator
/// `I grad pi^p(y_w|x) + (1 - I) grad pi^p(y_l|x)` over the data
/// distribution, enumerating contexts, pairs and both labels.
pub fn estimator_expectation(policy: &TabularPolicy, env: &PreferenceEnv) -> Result<GradientTable> {
    let (c, v) = env.shape();
    let mut total = Table::zeros(c, v);
    for x in 0..c {
        for pw in env.pairs(x) {
            let w = env.rho()[x] * pw.weight;
            if w == 0.0 {
                continue;
            }
            let star = env.p_star(x, pw.a, pw.b);
            // label 1: estimator is grad pi^p(y_w); label 0: grad pi^p(y_l)
            total.add_scaled(&grad_pairwise(policy, x, pw.a, pw.b)?, w * star);
            total.add_scaled(&grad_pairwise(policy, x, pw.b, pw.a)?, w * (1.0 - star));
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Report {
    pub max_abs_disagreement: f64,
    /// Per-coordinate z-scores of the Monte Carlo mean against the exact
    /// expectation; coordinates with zero sample variance are omitted.
    pub mc_z_scores: Vec<f64>,
    pub mc_samples: usize,
}

impl Theorem1Report {
    pub fn fraction_within(&self, z: f64) -> f64 {
        if self.mc_z_scores.is_empty() {
            return 1.0;
        }
        self.mc_z_scores.iter().filter(|s| s.abs() <= z).count() as f64 / self.mc_z_scores.len() as f64
    }
}

/// Compare (a) the enumerated estimator expectation, (b) the exact reward
/// gradient, and (c) a Monte Carlo mean over `mc_samples` sampled records.
pub fn theorem1_check(policy: &TabularPolicy, env: &PreferenceEnv, mc_samples: usize, seed: u64) -> Result<Theorem1Report> {
    let expected = estimator_expectation(policy, env)?;
    let exact = exact_preference_reward_gradient(policy, env)?;
    let max_abs_disagreement = expected.max_abs_diff(&exact);
    let mut mc_z_scores = Vec::new();
    if mc_samples > 0 {
        let (mean, var) = monte_carlo_estimator(policy, env, mc_samples, seed)?;
        let n = mc_samples as f64;
        for k in 0..mean.as_slice().len() {
            let sd = (var.as_slice()[k] / n).sqrt();
            let diff = mean.as_slice()[k] - expected.as_slice()[k];
            if sd > 0.0 {
                mc_z_scores.push(diff / sd);
            } else if diff.abs() > 1e-12 {
                mc_z_scores.push(f64::INFINITY);
            }
        }
    }
    Ok(Theorem1Report {
        max_abs_disagreement,
        mc_z_scores,
        mc_samples,
    })
}

const MC_CHUNK: usize = 65_536;

/// Sample mean and per-coordinate variance of the off-policy estimator.
/// Chunk `k` draws from stream `MONTE_CARLO + k` of `seed`.
fn monte_carlo_estimator(policy: &TabularPolicy, env: &PreferenceEnv, n: usize, seed: u64) -> Result<(Table, Table)> {
    let (c, v) = env.shape();
    let chunks = n.div_ceil(MC_CHUNK);
    let parts = map_indexed(chunks, |k| -> Result<(Table, Table)> {
        let len = MC_CHUNK.min(n - k * MC_CHUNK);
        let mut r = rng::stream(seed, rng::MONTE_CARLO + k as u64);
        let records = env::sample_preferences_with(env, len, &mut r)?;
        let mut sum = Table::zeros(c, v);
        let mut sq = Table::zeros(c, v);
        for s in &records {
            let probs = policy.probs_unchecked(s.x);
            let (win, lose) = s.winner_loser();
            let p = ratio_pref(&probs, win, lose);
            // grad pi^p(win) = p (1 - p) (e_win - e_lose)
            let coef = p * (1.0 - p);
            sum.add(s.x, win, coef);
            sum.add(s.x, lose, -coef);
            sq.add(s.x, win, coef * coef);
            sq.add(s.x, lose, coef * coef);
        }
        Ok((sum, sq))
    });
    let mut sum = Table::zeros(c, v);
    let mut sq = Table::zeros(c, v);
    for part in parts {
        let (s, q) = part?;
        sum.add_scaled(&s, 1.0);
        sq.add_scaled(&q, 1.0);
    }
    let nf = n as f64;
    sum.scale(1.0 / nf);
    let mut var = sq;
    var.scale(1.0 / nf);
    for (vv, m) in var.as_mut_slice().iter_mut().zip(sum.as_slice()) {
        *vv = (*vv - m * m).max(0.0) * nf / (nf - 1.0).max(1.0);
    }
    Ok((sum, var))
}

/// Mean and standard error of the realized preference reward when actions
/// are drawn from the policy's pairwise distribution on sampled records.
pub fn monte_carlo_preference_reward(policy: &TabularPolicy, env: &PreferenceEnv, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::stream(seed, rng::MONTE_CARLO);
    let records = env::sample_preferences_with(env, n, &mut r)?;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for s in &records {
        let probs = policy.probs_unchecked(s.x);
        let picks_first = r.random::<f64>() < ratio_pref(&probs, s.y_w, s.y_l);
        let reward = if picks_first == s.y_w_preferred { 1.0 } else { 0.0 };
        sum += reward;
        sq += reward * reward;
    }
    Ok(mean_and_stderr(sum, sq, n))
}

/// On-policy Monte Carlo estimate of `E[r - beta log(pi/ref)]` under
/// `x ~ rho`, `y ~ pi(.|x)`.
pub fn monte_carlo_kl_objective(
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    reward: &RewardTable,
    env: &PreferenceEnv,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let draws = env::sample_pair_dataset(env, policy, n, seed, rng::MONTE_CARLO)?;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for d in &draws {
        let g = reward.get(d.x, d.y) - beta * (policy.log_prob(d.x, d.y)? - reference.log_prob(d.x, d.y)?);
        sum += g;
        sq += g * g;
    }
    Ok(mean_and_stderr(sum, sq, n))
}

fn mean_and_stderr(sum: f64, sq: f64, n: usize) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    (mean, (var / nf).sqrt())
}

/// Losses accepted by [`shift_invariance_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLoss {
    Dpo,
    Ipo,
    MpoRm,
    MpoRef,
}

impl std::str::FromStr for ProbeLoss {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(ProbeLoss::Dpo),
            "ipo" => Ok(ProbeLoss::Ipo),
            "mpo_rm" => Ok(ProbeLoss::MpoRm),
            "mpo_ref" => Ok(ProbeLoss::MpoRef),
            other => Err(LabError::Config(format!("unknown probe loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ShiftReport {
    pub delta_loss: f64,
}

/// Hyperparameters and reference data used by the probe.
#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub beta: f64,
    pub tau: f64,
    pub ref_batch: Vec<PairSample>,
}

/// Change in the loss when both logits of the sample's pair are raised by
/// `c`.
pub fn shift_invariance_probe(
    loss: ProbeLoss,
    policy: &TabularPolicy,
    reference: &TabularPolicy,
    sample: PreferenceSample,
    c: f64,
    settings: &ProbeSettings,
) -> Result<ShiftReport> {
    policy.check_pair(sample.x, sample.y_w, sample.y_l)?;
    let eval = |p: &TabularPolicy| -> Result<f64> {
        let batch = [sample];
        Ok(match loss {
            ProbeLoss::Dpo => losses::dpo_loss(p, reference, &batch, settings.beta)?.value,
            ProbeLoss::Ipo => losses::ipo_loss(p, reference, &batch, settings.tau)?.value,
            ProbeLoss::MpoRm => losses::mpo_rm_loss(p, &batch)?.value,
            ProbeLoss::MpoRef => losses::ref_reg_loss(p, &settings.ref_batch, settings.beta)?.value,
        })
    };
    let mut shifted = policy.clone();
    shifted.logits_mut().add(sample.x, sample.y_w, c);
    shifted.logits_mut().add(sample.x, sample.y_l, c);
    Ok(ShiftReport {
        delta_loss: eval(&shifted)? - eval(policy)?,
    })
}

/// Max deviation of the implemented preference-term gradients from the
/// weighted log-ratio expressions, and of the weighted gradient from an
/// independently derived cross-entropy gradient.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradientFormReport {
    pub unweighted_vs_expression: f64,
    pub weighted_vs_expression: f64,
    pub weighted_vs_cross_entropy: f64,
}

pub fn gradient_form_identities(policy: &TabularPolicy, batch: &[PreferenceSample]) -> Result<GradientFormReport> {
    let (c, v) = policy.shape();
    let n = batch.len() as f64;
    let mut unweighted = Table::zeros(c, v);
    let mut weighted = Table::zeros(c, v);
    let mut cross_entropy = Table::zeros(c, v);
    for s in batch {
        let probs = policy.probs(s.x)?;
        let pw = ratio_pref(&probs, s.y_w, s.y_l);
        let pl = ratio_pref(&probs, s.y_l, s.y_w);
        let gw = policy.grad_log_prob(s.x, s.y_w)?;
        let gl = policy.grad_log_prob(s.x, s.y_l)?;
        let mut dir = gw.clone();
        dir.add_scaled(&gl, -1.0); // grad(log pi_w - log pi_l)
        let i = s.indicator();
        // -(I pw pl dir + (1 - I) pl pw (-dir))
        unweighted.add_scaled(&dir, -(i * pw * pl - (1.0 - i) * pl * pw) / n);
        // -(I pl dir + (1 - I) pw (-dir))
        weighted.add_scaled(&dir, -(i * pl - (1.0 - i) * pw) / n);
        // -grad[I log(pi_w / (pi_w + pi_l)) + (1 - I) log(pi_l / (pi_w + pi_l))]
        let (sw, sl) = (probs[s.y_w], probs[s.y_l]);
        let mut grad_log_mass = gw.clone();
        grad_log_mass.scale(sw / (sw + sl));
        grad_log_mass.add_scaled(&gl, sl / (sw + sl));
        let mut term = if s.y_w_preferred { gw } else { gl };
        term.add_scaled(&grad_log_mass, -1.0);
        cross_entropy.add_scaled(&term, -1.0 / n);
    }
    let rm = losses::mpo_rm_loss(policy, batch)?.gradient;
    let wrm = losses::mpo_rm_weighted_loss(policy, batch)?.gradient;
    Ok(GradientFormReport {
        unweighted_vs_expression: rm.max_abs_diff(&unweighted),
        weighted_vs_expression: wrm.max_abs_diff(&weighted),
        weighted_vs_cross_entropy: wrm.max_abs_diff(&cross_entropy),
    })
}

/// Random instance for a registered loss: policy, reference and batches
/// sized `C <= 4`, `V <= 6`.
pub fn random_loss_instance(r: &mut LabRng) -> (TabularPolicy, LossInstance) {
    let c = r.random_range(1..=4);
    let v = r.random_range(2..=6);
    let policy = env::random::policy(r, c, v, 2.5);
    let reference = env::random::policy(r, c, v, 2.5);
    let n = r.random_range(1..=24);
    let prefs = (0..n)
        .map(|_| {
            let a = r.random_range(0..v);
            let mut b = r.random_range(0..v - 1);
            if b >= a {
                b += 1;
            }
            PreferenceSample::new(r.random_range(0..c), a, b, r.random())
        })
        .collect();
    let pairs = |r: &mut LabRng| -> Vec<PairSample> {
        let m = r.random_range(1..=24);
        (0..m).map(|_| PairSample::new(r.random_range(0..c), r.random_range(0..v))).collect()
    };
    let instance = LossInstance {
        reference,
        ref_pairs: pairs(r),
        pretrain_pairs: pairs(r),
        prefs,
        beta: r.random_range(0.05..2.0),
        gamma: r.random_range(0.05..2.0),
        tau: r.random_range(0.1..5.0),
    };
    (policy, instance)
}

/// Which oracle suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    Theorem1,
    Invariances,
    ClosedForm,
    All,
}

impl std::str::FromStr for Suite {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradients" => Ok(Suite::Gradients),
            "theorem1" => Ok(Suite::Theorem1),
            "invariances" => Ok(Suite::Invariances),
            "closed-form" => Ok(Suite::ClosedForm),
            "all" => Ok(Suite::All),
            other => Err(LabError::Config(format!(
                "unknown suite {other:?} (expected gradients, theorem1, invariances, closed-form, all)"
            ))),
        }
    }
}

/// One line of a suite report.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub suite: &'static str,
    pub check: String,
    pub trials: usize,
    pub worst: f64,
    pub threshold: f64,
    /// `true` when the check requires `worst <= threshold`, `false` when it
    /// requires `worst > threshold`.
    pub upper_bound: bool,
    pub passed: bool,
}

impl CheckRow {
    fn at_most(suite: &'static str, check: impl Into<String>, trials: usize, worst: f64, threshold: f64) -> Self {
        CheckRow {
            suite,
            check: check.into(),
            trials,
            worst,
            threshold,
            upper_bound: true,
            passed: worst <= threshold,
        }
    }

    fn above(suite: &'static str, check: impl Into<String>, trials: usize, worst: f64, threshold: f64) -> Self {
        CheckRow {
            suite,
            check: check.into(),
            trials,
            worst,
            threshold,
            upper_bound: false,
            passed: worst > threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;
/// Steps at which the finite-difference tolerance must hold.
pub const FD_STEPS: [f64; 3] = [1e-4, FD_STEP, 1e-6];
pub const MPO_REF_MIN_DELTA: f64 = 0.01;

pub fn run_suite(suite: Suite, seed: u64, trials: usize) -> Result<SuiteReport> {
    let trials = trials.max(1);
    let mut rows = Vec::new();
    let wants = |s: Suite| suite == Suite::All || suite == s;
    if wants(Suite::Gradients) {
        rows.extend(gradient_suite(seed, trials)?);
    }
    if wants(Suite::Theorem1) {
        rows.extend(theorem1_suite(seed, trials)?);
    }
    if wants(Suite::Invariances) {
        rows.extend(invariance_suite(seed, trials)?);
    }
    if wants(Suite::ClosedForm) {
        rows.extend(closed_form_suite(seed, trials)?);
    }
    Ok(SuiteReport { seed, rows })
}

fn trial_rng(seed: u64, k: usize) -> LabRng {
    rng::stream(seed, rng::TRIALS + k as u64)
}

/// Ratio of finite-difference errors at `h` and `h / 2` on one instance;
/// `None` when the coarse error is too small to be truncation-dominated.
fn halving_ratio(kind: LossKind, policy: &TabularPolicy, inst: &LossInstance) -> Result<Option<f64>> {
    let analytic = inst.evaluate(kind, policy)?.gradient;
    let f = |p: &TabularPolicy| inst.evaluate(kind, p).map(|r| r.value);
    let coarse = relative_error(&analytic, &finite_diff_gradient(f, policy, 2e-2)?);
    let fine = relative_error(&analytic, &finite_diff_gradient(f, policy, 1e-2)?);
    if coarse < 1e-7 {
        return Ok(None);
    }
    Ok(Some(coarse / fine))
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

fn gradient_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for kind in LossKind::ALL {
        let results = map_indexed(trials, |k| -> Result<(f64, Option<f64>)> {
            let mut r = trial_rng(seed, k);
            let (policy, inst) = random_loss_instance(&mut r);
            let analytic = inst.evaluate(kind, &policy)?.gradient;
            let mut err: f64 = 0.0;
            for h in FD_STEPS {
                let fd = finite_diff_gradient(|p| inst.evaluate(kind, p).map(|r| r.value), &policy, h)?;
                err = err.max(relative_error(&analytic, &fd));
            }
            Ok((err, halving_ratio(kind, &policy, &inst)?))
        });
        let mut worst: f64 = 0.0;
        let mut ratios = Vec::new();
        for res in results {
            let (err, ratio) = res?;
            worst = worst.max(err);
            ratios.extend(ratio);
        }
        rows.push(CheckRow::at_most("gradients", format!("{} finite-difference rel. error (h = 1e-4..1e-6)", kind.name()), trials, worst, FD_TOLERANCE));
        // Losses that are quadratic in the logits (ipo) have no truncation
        // error, so every instance is skipped and the row reports 0 measured.
        let measured = ratios.len();
        let med = median(ratios);
        rows.push(CheckRow::at_most(
            "gradients",
            format!("{} |log2(error ratio at h/2) - 2|", kind.name()),
            measured,
            if med.is_nan() { 0.0 } else { (med.log2() - 2.0).abs() },
            0.25,
        ));
    }
    let forms = map_indexed(trials, |k| -> Result<GradientFormReport> {
        let mut r = trial_rng(seed ^ 0x5eed, k);
        let (policy, inst) = random_loss_instance(&mut r);
        gradient_form_identities(&policy, &inst.prefs)
    });
    let mut worst = [0.0f64; 3];
    for f in forms {
        let f = f?;
        worst[0] = worst[0].max(f.unweighted_vs_expression);
        worst[1] = worst[1].max(f.weighted_vs_expression);
        worst[2] = worst[2].max(f.weighted_vs_cross_entropy);
    }
    rows.push(CheckRow::at_most("gradients", "mpo_rm gradient vs pi_w*pi_l weighted form", trials, worst[0], 1e-10));
    rows.push(CheckRow::at_most("gradients", "mpo_rm_weighted gradient vs pi_loser weighted form", trials, worst[1], 1e-10));
    rows.push(CheckRow::at_most("gradients", "mpo_rm_weighted gradient vs cross-entropy gradient", trials, worst[2], 1e-10));
    Ok(rows)
}

/// Random instance with `C <= 5`, `V <= 8` for the importance-sampling check.
pub fn random_theorem1_instance(r: &mut LabRng) -> (TabularPolicy, PreferenceEnv) {
    let c = r.random_range(1..=5);
    let v = r.random_range(2..=8);
    let bt = r.random();
    let env = env::random::env(r, c, v, bt);
    (env::random::policy(r, c, v, 3.0), env)
}

fn theorem1_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let reports = map_indexed(trials, |k| -> Result<f64> {
        let mut r = trial_rng(seed, k);
        let (policy, env) = random_theorem1_instance(&mut r);
        Ok(theorem1_check(&policy, &env, 0, seed)?.max_abs_disagreement)
    });
    let mut worst: f64 = 0.0;
    for rep in reports {
        worst = worst.max(rep?);
    }
    let mut rows = vec![CheckRow::at_most("theorem1", "max |E[estimator] - exact gradient|", trials, worst, 1e-10)];
    let mut r = trial_rng(seed, trials);
    let (policy, env) = random_theorem1_instance(&mut r);
    let mc = theorem1_check(&policy, &env, 1_000_000, seed)?;
    rows.push(CheckRow::at_most(
        "theorem1",
        "fraction of MC coordinates with |z| > 4 (n = 1e6)",
        1,
        1.0 - mc.fraction_within(4.0),
        0.01,
    ));
    Ok(rows)
}

fn invariance_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let results = map_indexed(trials, |k| -> Result<(f64, f64, f64)> {
        let mut r = trial_rng(seed, k);
        let c = r.random_range(1..=4);
        let v = r.random_range(3..=6);
        let policy = env::random::policy(&mut r, c, v, 3.0);
        let reference = env::random::policy(&mut r, c, v, 3.0);
        let x = r.random_range(0..c);
        let a = r.random_range(0..v - 1);
        let b = r.random_range(a + 1..v);
        let off = (0..v).find(|y| *y != a && *y != b).expect("v >= 3");
        let sample = PreferenceSample::new(x, a, b, r.random());
        let settings = ProbeSettings {
            beta: r.random_range(0.1..2.0),
            tau: r.random_range(0.1..5.0),
            ref_batch: vec![PairSample::new(x, off)],
        };
        let shift = r.random_range(-5.0..5.0);
        let dpo = shift_invariance_probe(ProbeLoss::Dpo, &policy, &reference, sample, shift, &settings)?;
        let ipo = shift_invariance_probe(ProbeLoss::Ipo, &policy, &reference, sample, shift, &settings)?;
        // Logits in [-1, 1] keep the shifted pair's mass above 6%, so the
        // renormalization loss of the off-pair record exceeds 0.01.
        let moderate = env::random::policy(&mut r, c, v, 1.0);
        let unit = ProbeSettings { beta: 1.0, ..settings };
        let mpo_ref = shift_invariance_probe(ProbeLoss::MpoRef, &moderate, &reference, sample, 1.0, &unit)?;
        Ok((dpo.delta_loss.abs(), ipo.delta_loss.abs(), mpo_ref.delta_loss.abs()))
    });
    let (mut dpo, mut ipo, mut mpo_ref) = (0.0f64, 0.0f64, f64::INFINITY);
    for res in results {
        let (d, i, m) = res?;
        dpo = dpo.max(d);
        ipo = ipo.max(i);
        mpo_ref = mpo_ref.min(m);
    }
    Ok(vec![
        CheckRow::at_most("invariances", "dpo |delta| under pair logit shift", trials, dpo, 1e-12),
        CheckRow::at_most("invariances", "ipo |delta| under pair logit shift", trials, ipo, 1e-12),
        CheckRow::above("invariances", "mpo_ref min |delta| with off-pair reference data (c = 1)", trials, mpo_ref, MPO_REF_MIN_DELTA),
    ])
}

fn closed_form_suite(seed: u64, trials: usize) -> Result<Vec<CheckRow>> {
    let results = map_indexed(trials, |k| -> Result<(f64, f64)> {
        let mut r = trial_rng(seed, k);
        let c = r.random_range(1..=4);
        let v = r.random_range(2..=7);
        let reference = env::random::policy(&mut r, c, v, 2.0);
        let reward = RewardTable::from_table(env::random::policy(&mut r, c, v, 3.0).logits().clone())?;
        let beta = r.random_range(0.1..3.0);
        let optimal = losses::optimal_policy_closed_form(&reference, &reward, beta)?;
        let implied = losses::implicit_reward(&optimal, &reference, beta)?;
        let round_trip = implied.max_difference_error(&reward);
        let mut composition: f64 = 0.0;
        for x in 0..c {
            for a in 0..v {
                for b in 0..v {
                    if a != b {
                        let truth = reward.bt_probability(x, a, b);
                        composition = composition.max((implied.bt_probability(x, a, b) - truth).abs());
                    }
                }
            }
        }
        Ok((round_trip, composition))
    });
    let (mut rt, mut comp) = (0.0f64, 0.0f64);
    for res in results {
        let (a, b) = res?;
        rt = rt.max(a);
        comp = comp.max(b);
    }
    Ok(vec![
        CheckRow::at_most("closed-form", "implicit reward of closed-form policy: within-context differences", trials, rt, 1e-10),
        CheckRow::at_most("closed-form", "pair score from implicit reward vs BT p*", trials, comp, 1e-10),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = TabularPolicy::uniform(2, 3);
        let g = finite_diff_gradient(|_| Ok(3.5), &p, 1e-5).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn quadratic_objective() {
        let mut r = rng::stream(1, 0);
        let p = env::random::policy(&mut r, 2, 3, 2.0);
        let g = finite_diff_gradient(|q| Ok(q.logits().as_slice().iter().map(|v| v * v).sum()), &p, 1e-5).unwrap();
        for (gv, th) in g.as_slice().iter().zip(p.logits().as_slice()) {
            assert!((gv - 2.0 * th).abs() < 1e-8);
        }
    }

    #[test]
    fn log_prob_objective_matches_softmax_gradient() {
        let mut r = rng::stream(2, 0);
        let p = env::random::policy(&mut r, 3, 4, 2.0);
        let g = finite_diff_gradient(|q| q.log_prob(1, 2), &p, 1e-5).unwrap();
        assert!(relative_error(&p.grad_log_prob(1, 2).unwrap(), &g) < 1e-6);
    }

    #[test]
    fn non_finite_objective_is_an_oracle_failure() {
        let p = TabularPolicy::uniform(1, 2);
        let err = finite_diff_gradient(|_| Ok(f64::NAN), &p, 1e-5).unwrap_err();
        assert!(matches!(err, LabError::OracleFailure(_)));
    }

    #[test]
    fn half_preferences_give_zero_on_both_sides() {
        let mut r = rng::stream(3, 0);
        let (policy, env) = random_theorem1_instance(&mut r);
        let half = env::PreferenceEnv::new(
            env.rho().to_vec(),
            env.num_responses(),
            (0..env.num_contexts()).map(|x| env.pairs(x).to_vec()).collect(),
            env::GroundTruth::BradleyTerry(RewardTable::zeros(env.num_contexts(), env.num_responses())),
        )
        .unwrap();
        let rep = theorem1_check(&policy, &half, 0, 0).unwrap();
        assert!(estimator_expectation(&policy, &half).unwrap().max_abs() < 1e-12);
        assert!(rep.max_abs_disagreement < 1e-12);
    }

    #[test]
    fn probe_names() {
        assert_eq!("dpo".parse::<ProbeLoss>().unwrap(), ProbeLoss::Dpo);
        assert!(matches!("kto".parse::<ProbeLoss>(), Err(LabError::Config(_))));
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn probe_examples() {
        let mut r = rng::stream(4, 0);
        let policy = env::random::policy(&mut r, 2, 5, 2.0);
        let reference = env::random::policy(&mut r, 2, 5, 2.0);
        let sample = PreferenceSample::new(1, 0, 3, true);
        let settings = ProbeSettings {
            beta: 1.0,
            tau: 0.5,
            ref_batch: vec![PairSample::new(1, 2), PairSample::new(1, 4)],
        };
        let d = shift_invariance_probe(ProbeLoss::Dpo, &policy, &reference, sample, 3.7, &settings).unwrap();
        assert!(d.delta_loss.abs() <= 1e-12);
        let i = shift_invariance_probe(ProbeLoss::Ipo, &policy, &reference, sample, -2.0, &settings).unwrap();
        assert!(i.delta_loss.abs() <= 1e-12);
        let m = shift_invariance_probe(ProbeLoss::MpoRef, &policy, &reference, sample, 1.0, &settings).unwrap();
        assert!(m.delta_loss > 0.01, "{}", m.delta_loss);
    }
}

//! Synthetic ground truth: context distribution, pair distribution and
//! preference probabilities, with exact expectations over them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{PairSample, PreferenceSample};
use crate::error::{LabError, Result};
use crate::policy::TabularPolicy;
use crate::reward::RewardTable;
use crate::rng;
use crate::table::{GradientTable, Table};

const SUM_TOL: f64 = 1e-12;

/// Weight of the unordered pair `{a, b}` (stored with `a < b`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairWeight {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Where preference probabilities come from.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    /// `p*(a > b | x) = sigmoid(r(x,a) - r(x,b))`.
    BradleyTerry(RewardTable),
    /// Arbitrary table; entry `(a, b)` with `a < b` of context `x` holds
    /// `p*(a > b | x)`. The other triangle is ignored.
    Free(Vec<Table>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceEnv {
    rho: Vec<f64>,
    num_responses: usize,
    mu: Vec<Vec<PairWeight>>,
    truth: GroundTruth,
    /// Canonical `p*(a > b | x)` for `a < b`, a `V x V` table per context.
    canonical: Vec<Table>,
}

/// Uniform weights over all `V (V - 1) / 2` unordered pairs.
pub fn uniform_pairs(num_responses: usize) -> Vec<PairWeight> {
    let n = num_responses * num_responses.saturating_sub(1) / 2;
    let mut out = Vec::with_capacity(n);
    for a in 0..num_responses {
        for b in (a + 1)..num_responses {
            out.push(PairWeight {
                a,
                b,
                weight: 1.0 / n as f64,
            });
        }
    }
    out
}

impl PreferenceEnv {
    pub fn new(
        rho: Vec<f64>,
        num_responses: usize,
        mu: Vec<Vec<PairWeight>>,
        truth: GroundTruth,
    ) -> Result<Self> {
        let c = rho.len();
        if c == 0 {
            return Err(LabError::Config("rho must cover at least one context".into()));
        }
        if num_responses < 2 {
            return Err(LabError::Config("at least two responses are required".into()));
        }
        check_distribution("rho", &rho)?;
        if mu.len() != c {
            return Err(LabError::Shape(format!("mu has {} contexts, rho has {c}", mu.len())));
        }
        for (x, pairs) in mu.iter().enumerate() {
            let mut seen = std::collections::BTreeSet::new();
            for p in pairs {
                if p.a >= p.b || p.b >= num_responses {
                    return Err(LabError::Config(format!(
                        "mu[{x}]: pair {}-{} must satisfy a < b < {num_responses}",
                        p.a, p.b
                    )));
                }
                if !seen.insert((p.a, p.b)) {
                    return Err(LabError::Config(format!("mu[{x}]: duplicate pair {}-{}", p.a, p.b)));
                }
            }
            let weights: Vec<f64> = pairs.iter().map(|p| p.weight).collect();
            if !weights.iter().any(|&w| w > 0.0) {
                return Err(LabError::Config(format!("mu[{x}] has no pair with positive weight")));
            }
            check_distribution(&format!("mu[{x}]"), &weights)?;
        }
        let canonical = match &truth {
            GroundTruth::BradleyTerry(r) => {
                if r.shape() != (c, num_responses) {
                    return Err(LabError::Shape(format!(
                        "reward table {:?} vs env {c}x{num_responses}",
                        r.shape()
                    )));
                }
                (0..c)
                    .map(|x| {
                        let mut t = Table::zeros(num_responses, num_responses);
                        for a in 0..num_responses {
                            for b in (a + 1)..num_responses {
                                t.set(a, b, r.bt_probability(x, a, b));
                            }
                        }
                        t
                    })
                    .collect()
            }
            GroundTruth::Free(tables) => {
                if tables.len() != c
                    || tables.iter().any(|t| t.shape() != (num_responses, num_responses))
                {
                    return Err(LabError::Shape("p_star must be one VxV table per context".into()));
                }
                for (x, t) in tables.iter().enumerate() {
                    for a in 0..num_responses {
                        for b in (a + 1)..num_responses {
                            let p = t.get(a, b);
                            if !(0.0..=1.0).contains(&p) {
                                return Err(LabError::Config(format!(
                                    "p_star[{x}] {a}>{b} = {p} outside [0, 1]"
                                )));
                            }
                        }
                    }
                }
                tables.clone()
            }
        };
        Ok(PreferenceEnv {
            rho,
            num_responses,
            mu,
            truth,
            canonical,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.rho.len()
    }

    pub fn num_responses(&self) -> usize {
        self.num_responses
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_contexts(), self.num_responses)
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn pairs(&self, x: usize) -> &[PairWeight] {
        &self.mu[x]
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn is_bradley_terry(&self) -> bool {
        matches!(self.truth, GroundTruth::BradleyTerry(_))
    }

    /// `p*(a > b | x)` for any ordered pair `a != b`. The reverse order is
    /// derived as `1 - p`, so complementary entries always sum to one.
    pub fn p_star(&self, x: usize, a: usize, b: usize) -> f64 {
        debug_assert_ne!(a, b);
        if a < b {
            self.canonical[x].get(a, b)
        } else {
            1.0 - self.canonical[x].get(b, a)
        }
    }

    fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        if shape != self.shape() {
            return Err(LabError::Shape(format!(
                "policy {:?} vs env {:?}",
                shape,
                self.shape()
            )));
        }
        Ok(())
    }

    /// Every `(x, pair)` with positive probability, as
    /// `(x, a, b, rho(x) * mu(pair|x))`.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.rho.iter().enumerate().flat_map(move |(x, &r)| {
            self.mu[x]
                .iter()
                .filter(move |p| r > 0.0 && p.weight > 0.0)
                .map(move |p| (x, p.a, p.b, r * p.weight))
        })
    }
}

fn check_distribution(name: &str, w: &[f64]) -> Result<()> {
    if let Some(bad) = w.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(LabError::Config(format!("{name} has invalid weight {bad}")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(LabError::Config(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

/// Draw `n` labelled comparisons on the dedicated preference stream of
/// `seed`.
pub fn sample_preference_dataset(
    env: &PreferenceEnv,
    n: usize,
    seed: u64,
) -> Result<Vec<PreferenceSample>> {
    sample_preferences_with(env, n, &mut rng::stream(seed, rng::PREFERENCES))
}

/// Draw comparisons from an explicit generator: `x ~ rho`, `{a, b} ~ mu(.|x)`
/// stored as `y_w = min`, `y_l = max`, and the label `~ Bernoulli(p*(y_w > y_l))`.
pub fn sample_preferences_with<R: Rng>(
    env: &PreferenceEnv,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PreferenceSample>> {
    if n == 0 {
        return Err(LabError::EmptyInput("preference dataset size must be >= 1"));
    }
    let contexts = WeightedIndex::new(&env.rho).map_err(|e| LabError::Config(format!("rho: {e}")))?;
    let pair_dists = env
        .mu
        .iter()
        .enumerate()
        .map(|(x, pairs)| {
            WeightedIndex::new(pairs.iter().map(|p| p.weight))
                .map_err(|e| LabError::Config(format!("mu[{x}] is degenerate: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = contexts.sample(rng);
        let pair = env.mu[x][pair_dists[x].sample(rng)];
        let u: f64 = rng.random();
        out.push(PreferenceSample::new(x, pair.a, pair.b, u < env.p_star(x, pair.a, pair.b)));
    }
    Ok(out)
}

/// Draw `(x, y)` records with `x ~ rho` and `y ~ target(.|x)` on the given
/// stream of `seed`.
pub fn sample_pair_dataset(
    env: &PreferenceEnv,
    target: &TabularPolicy,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<PairSample>> {
    sample_pairs_with(env, target, n, &mut rng::stream(seed, stream))
}

pub fn sample_pairs_with<R: Rng>(
    env: &PreferenceEnv,
    target: &TabularPolicy,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PairSample>> {
    env.check_shape(target.shape())?;
    if n == 0 {
        return Err(LabError::EmptyInput("pair dataset size must be >= 1"));
    }
    let contexts = WeightedIndex::new(&env.rho).map_err(|e| LabError::Config(format!("rho: {e}")))?;
    let responses = (0..env.num_contexts())
        .map(|x| {
            WeightedIndex::new(target.probs_unchecked(x))
                .map_err(|e| LabError::Config(format!("target row {x}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n)
        .map(|_| {
            let x = contexts.sample(rng);
            PairSample::new(x, responses[x].sample(rng))
        })
        .collect())
}

/// Expected preference reward of the policy's local pairwise distribution,
/// by full enumeration of contexts and pairs.
pub fn exact_expected_preference_reward(policy: &TabularPolicy, env: &PreferenceEnv) -> Result<f64> {
    env.check_shape(policy.shape())?;
    let mut total = 0.0;
    for (x, a, b, w) in env.support() {
        let pa = policy.pairwise_pref_unchecked(x, a, b);
        let pb = policy.pairwise_pref_unchecked(x, b, a);
        let star = env.p_star(x, a, b);
        total += w * (pa * star + pb * (1.0 - star));
    }
    Ok(total)
}

/// Exact gradient of [`exact_expected_preference_reward`].
///
/// Each `(x, {a, b})` term is `p* pi_a + (1 - p*) pi_b` with
/// `grad pi_a = -grad pi_b = pi_a pi_b (e_a - e_b)` in logit space, so only
/// the two pair logits of row `x` move.
pub fn exact_preference_reward_gradient(
    policy: &TabularPolicy,
    env: &PreferenceEnv,
) -> Result<GradientTable> {
    env.check_shape(policy.shape())?;
    let mut g = Table::zeros(env.num_contexts(), env.num_responses());
    for (x, a, b, w) in env.support() {
        let pa = policy.pairwise_pref_unchecked(x, a, b);
        let pb = policy.pairwise_pref_unchecked(x, b, a);
        let star = env.p_star(x, a, b);
        let coef = w * (star - (1.0 - star)) * pa * pb;
        g.add(x, a, coef);
        g.add(x, b, -coef);
    }
    Ok(g)
}

/// Environment file plus the generator policies used to draw the reference
/// and pretraining corpora.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub env: PreferenceEnv,
    pub sft_generator: TabularPolicy,
    pub pretrain_generator: TabularPolicy,
}

#[derive(Debug, Serialize, Deserialize)]
struct EnvFile {
    num_responses: usize,
    rho: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mu: Option<Vec<Option<BTreeMap<String, f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reward: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p_star: Option<Vec<BTreeMap<String, f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sft_logits: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pretrain_logits: Option<Vec<Vec<f64>>>,
}

fn parse_key(key: &str, sep: char, v: usize) -> std::result::Result<(usize, usize), String> {
    let (l, r) = key
        .split_once(sep)
        .ok_or_else(|| format!("key {key:?} is not of the form a{sep}b"))?;
    let a: usize = l.trim().parse().map_err(|_| format!("bad response id in {key:?}"))?;
    let b: usize = r.trim().parse().map_err(|_| format!("bad response id in {key:?}"))?;
    if a == b || a >= v || b >= v {
        return Err(format!("key {key:?} must name two distinct responses below {v}"));
    }
    Ok((a, b))
}

/// 1-based line of the first occurrence of `"field"` in `text`, or 1.
fn line_of(text: &str, field: &str) -> usize {
    let needle = format!("\"{field}\"");
    text.find(&needle)
        .map(|pos| text[..pos].matches('\n').count() + 1)
        .unwrap_or(1)
}

impl EnvSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let file: EnvFile =
            serde_json::from_str(text).map_err(|e| LabError::parse(path, e.line(), e))?;
        let at = |field: &str, msg: String| LabError::parse(path, line_of(text, field), msg);
        let v = file.num_responses;
        let c = file.rho.len();
        if v < 2 {
            return Err(at("num_responses", "at least two responses are required".into()));
        }
        let mu = match &file.mu {
            None => vec![uniform_pairs(v); c],
            Some(rows) => {
                if rows.len() != c {
                    return Err(at("mu", format!("{} entries for {c} contexts", rows.len())));
                }
                rows.iter()
                    .map(|row| match row {
                        None => Ok(uniform_pairs(v)),
                        Some(map) => map
                            .iter()
                            .map(|(k, &w)| {
                                let (a, b) = parse_key(k, '-', v).map_err(|m| at("mu", m))?;
                                if a > b {
                                    return Err(at("mu", format!("pair key {k:?} must be written low-high")));
                                }
                                Ok(PairWeight { a, b, weight: w })
                            })
                            .collect(),
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let truth = match (&file.reward, &file.p_star) {
            (Some(_), Some(_)) => {
                return Err(at("p_star", "give either \"reward\" or \"p_star\", not both".into()))
            }
            (None, None) => {
                return Err(at("rho", "one of \"reward\" or \"p_star\" is required".into()))
            }
            (Some(rows), None) => GroundTruth::BradleyTerry(
                RewardTable::from_rows(rows).map_err(|e| at("reward", e.to_string()))?,
            ),
            (None, Some(maps)) => {
                if maps.len() != c {
                    return Err(at("p_star", format!("{} entries for {c} contexts", maps.len())));
                }
                let mut tables = Vec::with_capacity(c);
                for (x, map) in maps.iter().enumerate() {
                    let mut t = Table::zeros(v, v);
                    let mut given = vec![vec![None; v]; v];
                    for (k, &p) in map {
                        let (a, b) = parse_key(k, '>', v).map_err(|m| at("p_star", m))?;
                        given[a][b] = Some(p);
                    }
                    for a in 0..v {
                        for b in (a + 1)..v {
                            let p = match (given[a][b], given[b][a]) {
                                (Some(p), Some(q)) if (p + q - 1.0).abs() > SUM_TOL => {
                                    return Err(at(
                                        "p_star",
                                        format!("context {x}: {a}>{b} and {b}>{a} do not sum to 1"),
                                    ))
                                }
                                (Some(p), _) => p,
                                (None, Some(q)) => 1.0 - q,
                                (None, None) => {
                                    if mu[x].iter().any(|pw| pw.a == a && pw.b == b && pw.weight > 0.0) {
                                        return Err(at(
                                            "p_star",
                                            format!("context {x}: missing preference for sampled pair {a}-{b}"),
                                        ));
                                    }
                                    0.5
                                }
                            };
                            t.set(a, b, p);
                        }
                    }
                    tables.push(t);
                }
                GroundTruth::Free(tables)
            }
        };
        let env = PreferenceEnv::new(file.rho.clone(), v, mu, truth).map_err(|e| {
            let field = match &e {
                LabError::Config(m) if m.starts_with("mu") => "mu",
                LabError::Config(m) if m.starts_with("p_star") => "p_star",
                _ => "rho",
            };
            at(field, e.to_string())
        })?;
        let generator = |rows: &Option<Vec<Vec<f64>>>, field: &str| -> Result<TabularPolicy> {
            match rows {
                None => Ok(TabularPolicy::uniform(c, v)),
                Some(rows) => {
                    let p = TabularPolicy::from_rows(rows).map_err(|e| at(field, e.to_string()))?;
                    if p.shape() != (c, v) {
                        return Err(at(field, format!("shape {:?}, expected {c}x{v}", p.shape())));
                    }
                    Ok(p)
                }
            }
        };
        Ok(EnvSpec {
            sft_generator: generator(&file.sft_logits, "sft_logits")?,
            pretrain_generator: generator(&file.pretrain_logits, "pretrain_logits")?,
            env,
        })
    }

    /// Canonical JSON text for this spec (pairs and keys in sorted order).
    pub fn to_json_string(&self) -> String {
        let env = &self.env;
        let v = env.num_responses;
        let mu = env
            .mu
            .iter()
            .map(|pairs| {
                Some(
                    pairs
                        .iter()
                        .map(|p| (format!("{}-{}", p.a, p.b), p.weight))
                        .collect::<BTreeMap<_, _>>(),
                )
            })
            .collect();
        let (reward, p_star) = match &env.truth {
            GroundTruth::BradleyTerry(r) => (Some(r.table().to_rows()), None),
            GroundTruth::Free(_) => {
                let maps = (0..env.num_contexts())
                    .map(|x| {
                        let mut m = BTreeMap::new();
                        for a in 0..v {
                            for b in (a + 1)..v {
                                m.insert(format!("{a}>{b}"), env.p_star(x, a, b));
                            }
                        }
                        m
                    })
                    .collect();
                (None, Some(maps))
            }
        };
        let file = EnvFile {
            num_responses: v,
            rho: env.rho.clone(),
            mu: Some(mu),
            reward,
            p_star,
            sft_logits: Some(self.sft_generator.logits().to_rows()),
            pretrain_logits: Some(self.pretrain_generator.logits().to_rows()),
        };
        serde_json::to_string_pretty(&file).expect("env serializes")
    }
}

/// Random instances for oracles and property checks.
pub mod random {
    use super::*;

    /// Context weights bounded away from zero.
    pub fn distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| 0.2 + rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let mut out: Vec<f64> = raw.iter().map(|v| v / s).collect();
        // Put the rounding residue on the last entry so the sum is 1 to the ulp.
        let head: f64 = out[..n - 1].iter().sum();
        out[n - 1] = 1.0 - head;
        out
    }

    /// Random environment with `num_contexts x num_responses` shape. Roughly
    /// half of the pairs of each context are in the support.
    pub fn env<R: Rng>(rng: &mut R, num_contexts: usize, num_responses: usize, bt: bool) -> PreferenceEnv {
        let rho = distribution(rng, num_contexts);
        let mu = (0..num_contexts)
            .map(|_| {
                let all = uniform_pairs(num_responses);
                let mut chosen: Vec<_> = all.iter().filter(|_| rng.random::<f64>() < 0.6).copied().collect();
                if chosen.is_empty() {
                    chosen.push(all[rng.random_range(0..all.len())]);
                }
                let w = distribution(rng, chosen.len());
                for (p, w) in chosen.iter_mut().zip(w) {
                    p.weight = w;
                }
                chosen
            })
            .collect();
        let truth = if bt {
            let rows: Vec<Vec<f64>> = (0..num_contexts)
                .map(|_| (0..num_responses).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            GroundTruth::BradleyTerry(RewardTable::from_rows(&rows).expect("finite"))
        } else {
            let tables = (0..num_contexts)
                .map(|_| {
                    let mut t = Table::zeros(num_responses, num_responses);
                    for a in 0..num_responses {
                        for b in (a + 1)..num_responses {
                            t.set(a, b, rng.random());
                        }
                    }
                    t
                })
                .collect();
            GroundTruth::Free(tables)
        };
        PreferenceEnv::new(rho, num_responses, mu, truth).expect("random env is valid")
    }

    pub fn policy<R: Rng>(rng: &mut R, num_contexts: usize, num_responses: usize, scale: f64) -> TabularPolicy {
        let rows: Vec<Vec<f64>> = (0..num_contexts)
            .map(|_| (0..num_responses).map(|_| rng.random_range(-scale..scale)).collect())
            .collect();
        TabularPolicy::from_rows(&rows).expect("finite")
    }
}

//! Tabular softmax policies.
//!
//! A policy is a `contexts x responses` table of logits; `pi(y|x)` is the
//! softmax of row `x`. Nothing is cached: every query renormalizes the row in
//! log space, which keeps saturated rows (logit gaps of +-50 and beyond)
//! exact.

use std::path::Path;

use crate::error::{LabError, Result};
use crate::math::{logsumexp, sigmoid};
use crate::table::{GradientTable, MatrixFile, Table};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    logits: Table,
}

impl TabularPolicy {
    /// All-zero logits, i.e. the uniform policy in every context.
    pub fn uniform(num_contexts: usize, num_responses: usize) -> Self {
        assert!(num_contexts > 0 && num_responses > 0, "empty policy shape");
        TabularPolicy {
            logits: Table::zeros(num_contexts, num_responses),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::from_table(Table::from_rows(rows)?)
    }

    pub fn from_table(logits: Table) -> Result<Self> {
        if !logits.all_finite() {
            return Err(LabError::Config("policy logits must be finite".into()));
        }
        Ok(TabularPolicy { logits })
    }

    pub fn num_contexts(&self) -> usize {
        self.logits.num_rows()
    }

    pub fn num_responses(&self) -> usize {
        self.logits.num_cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits.shape()
    }

    pub fn logits(&self) -> &Table {
        &self.logits
    }

    /// Direct logit access for optimizers. Callers are responsible for
    /// keeping entries finite.
    pub fn logits_mut(&mut self) -> &mut Table {
        &mut self.logits
    }

    pub fn max_abs_logit(&self) -> f64 {
        self.logits.max_abs()
    }

    pub(crate) fn check_context(&self, x: usize) -> Result<()> {
        if x >= self.num_contexts() {
            return Err(LabError::Index {
                what: "context",
                index: x,
                bound: self.num_contexts(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_response(&self, y: usize) -> Result<()> {
        if y >= self.num_responses() {
            return Err(LabError::Index {
                what: "response",
                index: y,
                bound: self.num_responses(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_pair(&self, x: usize, a: usize, b: usize) -> Result<()> {
        self.check_context(x)?;
        self.check_response(a)?;
        self.check_response(b)?;
        if a == b {
            return Err(LabError::InvalidPair(a));
        }
        Ok(())
    }

    /// `log pi(y|x)`.
    pub fn log_prob(&self, x: usize, y: usize) -> Result<f64> {
        self.check_context(x)?;
        self.check_response(y)?;
        Ok(self.log_prob_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn log_prob_unchecked(&self, x: usize, y: usize) -> f64 {
        let row = self.logits.row(x);
        row[y] - logsumexp(row)
    }

    /// Log-probabilities of a full context row.
    pub fn log_probs(&self, x: usize) -> Result<Vec<f64>> {
        self.check_context(x)?;
        Ok(self.log_probs_unchecked(x))
    }

    pub(crate) fn log_probs_unchecked(&self, x: usize) -> Vec<f64> {
        let row = self.logits.row(x);
        let lse = logsumexp(row);
        row.iter().map(|&v| v - lse).collect()
    }

    /// `pi(.|x)` as a probability vector.
    pub fn probs(&self, x: usize) -> Result<Vec<f64>> {
        self.check_context(x)?;
        Ok(self.probs_unchecked(x))
    }

    pub(crate) fn probs_unchecked(&self, x: usize) -> Vec<f64> {
        self.log_probs_unchecked(x).into_iter().map(f64::exp).collect()
    }

    /// Local pairwise distribution: probability that the policy ranks `y_w`
    /// over `y_l` when restricted to the two responses.
    pub fn pairwise_pref(&self, x: usize, y_w: usize, y_l: usize) -> Result<f64> {
        self.check_pair(x, y_w, y_l)?;
        Ok(self.pairwise_pref_unchecked(x, y_w, y_l))
    }

    /// The row normalizer cancels, so only the logit gap matters.
    #[inline]
    pub(crate) fn pairwise_pref_unchecked(&self, x: usize, y_w: usize, y_l: usize) -> f64 {
        sigmoid(self.logit_gap(x, y_w, y_l))
    }

    /// `log pi(a|x) - log pi(b|x)`, which equals the raw logit difference.
    #[inline]
    pub(crate) fn logit_gap(&self, x: usize, a: usize, b: usize) -> f64 {
        self.logits.get(x, a) - self.logits.get(x, b)
    }

    /// Gradient of `log pi(y|x)` with respect to every logit.
    pub fn grad_log_prob(&self, x: usize, y: usize) -> Result<GradientTable> {
        self.check_context(x)?;
        self.check_response(y)?;
        let mut g = Table::zeros(self.num_contexts(), self.num_responses());
        let probs = self.probs_unchecked(x);
        let row = g.row_mut(x);
        for (yy, (slot, p)) in row.iter_mut().zip(&probs).enumerate() {
            *slot = if yy == y { 1.0 - p } else { -p };
        }
        Ok(g)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_matrix_json(path, &self.logits)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_table(read_matrix_json(path)?)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(&MatrixFile::from_table(&self.logits)).expect("matrix serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: MatrixFile =
            serde_json::from_str(s).map_err(|e| LabError::parse("<policy>", e.line(), e))?;
        Self::from_table(file.into_table()?)
    }
}

pub(crate) fn write_matrix_json(path: &Path, table: &Table) -> Result<()> {
    let mut text = serde_json::to_string(&MatrixFile::from_table(table)).expect("matrix serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub(crate) fn read_matrix_json(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let file: MatrixFile =
        serde_json::from_str(&text).map_err(|e| LabError::parse(path, e.line(), e))?;
    file.into_table()
}

/// Context-weighted KL divergence `sum_x w(x) KL(p(.|x) || q(.|x))` in nats.
pub fn kl_divergence(p: &TabularPolicy, q: &TabularPolicy, weights: &[f64]) -> Result<f64> {
    p.logits.ensure_same_shape(&q.logits)?;
    if weights.len() != p.num_contexts() {
        return Err(LabError::Shape(format!(
            "{} context weights for {} contexts",
            weights.len(),
            p.num_contexts()
        )));
    }
    let mut total = 0.0;
    for (x, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let lp = p.log_probs_unchecked(x);
        let lq = q.log_probs_unchecked(x);
        let row: f64 = lp
            .iter()
            .zip(&lq)
            .map(|(&a, &b)| {
                let pa = a.exp();
                if pa == 0.0 {
                    0.0
                } else {
                    pa * (a - b)
                }
            })
            .sum();
        total += w * row;
    }
    // Roundoff can leave identical rows at -1e-17.
    Ok(total.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn uniform_log_prob() {
        let p = TabularPolicy::uniform(1, 4);
        assert!((p.log_prob(0, 0).unwrap() - (0.25f64).ln()).abs() < 1e-15);
        let p2 = TabularPolicy::uniform(1, 2);
        assert!((p2.log_prob(0, 1).unwrap() + LN2).abs() < 1e-15);
    }

    #[test]
    fn log_prob_matches_term_by_term_oracle() {
        let p = TabularPolicy::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        // log(e / (e + 2)) summed naively without max subtraction
        let oracle = 1.0 - (1f64.exp() + 1.0 + 1.0).ln();
        assert!((p.log_prob(0, 0).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn out_of_range_indices_error() {
        let p = TabularPolicy::uniform(2, 3);
        assert!(matches!(p.log_prob(2, 0), Err(LabError::Index { what: "context", .. })));
        assert!(matches!(p.log_prob(0, 3), Err(LabError::Index { what: "response", .. })));
        assert!(p.grad_log_prob(0, 9).is_err());
        assert!(matches!(p.pairwise_pref(0, 1, 1), Err(LabError::InvalidPair(1))));
    }

    #[test]
    fn pairwise_pref_examples() {
        let p = TabularPolicy::uniform(2, 5);
        assert_eq!(p.pairwise_pref(1, 0, 4).unwrap(), 0.5);
        let q = TabularPolicy::from_rows(&[vec![3f64.ln(), 0.0, 1.0]]).unwrap();
        assert!((q.pairwise_pref(0, 0, 1).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn grad_log_prob_uniform_two() {
        let p = TabularPolicy::uniform(2, 2);
        let g = p.grad_log_prob(1, 0).unwrap();
        assert_eq!(g.row(1), &[0.5, -0.5]);
        assert_eq!(g.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn kl_two_point_example() {
        let p = TabularPolicy::uniform(1, 2);
        let q = TabularPolicy::from_rows(&[vec![0.8f64.ln(), 0.2f64.ln()]]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.8).ln() + 0.5 * (0.5f64 / 0.2).ln();
        let kl = kl_divergence(&p, &q, &[1.0]).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.2231436).abs() < 1e-7);
        assert_eq!(kl_divergence(&q, &q, &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_shape_mismatch() {
        let p = TabularPolicy::uniform(1, 2);
        let q = TabularPolicy::uniform(1, 3);
        assert!(matches!(kl_divergence(&p, &q, &[1.0]), Err(LabError::Shape(_))));
        assert!(kl_divergence(&p, &p, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = TabularPolicy::from_rows(&[vec![0.1, -1.0 / 3.0, 1e-300], vec![std::f64::consts::PI, 2.0, -7.25e12]]).unwrap();
        let back = TabularPolicy::from_json_str(&p.to_json_string()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(TabularPolicy::from_rows(&[vec![f64::NAN, 0.0]]).is_err());
    }

    fn policy_strategy() -> impl Strategy<Value = TabularPolicy> {
        (1usize..4, 2usize..7).prop_flat_map(|(c, v)| {
            proptest::collection::vec(proptest::collection::vec(-60.0f64..60.0, v), c)
                .prop_map(|rows| TabularPolicy::from_rows(&rows).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rows_normalize(p in policy_strategy()) {
            for x in 0..p.num_contexts() {
                let s: f64 = p.probs(x).unwrap().iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn pairwise_forms_agree(p in policy_strategy()) {
            for x in 0..p.num_contexts() {
                let pr = p.probs(x).unwrap();
                for a in 0..p.num_responses() {
                    for b in 0..p.num_responses() {
                        if a == b { continue; }
                        let sig = p.pairwise_pref(x, a, b).unwrap();
                        let lp_form = sigmoid(p.log_prob(x, a).unwrap() - p.log_prob(x, b).unwrap());
                        prop_assert!((sig - lp_form).abs() < 1e-12);
                        if pr[a] + pr[b] > 0.0 {
                            prop_assert!((sig - pr[a] / (pr[a] + pr[b])).abs() < 1e-12);
                        }
                    }
                }
            }
        }

        #[test]
        fn row_shift_invariance(p in policy_strategy(), c in -20.0f64..20.0) {
            let mut q = p.clone();
            for v in q.logits_mut().row_mut(0) { *v += c; }
            for y in 0..p.num_responses() {
                prop_assert!((p.log_prob(0, y).unwrap() - q.log_prob(0, y).unwrap()).abs() < 1e-12);
            }
            if p.num_responses() > 1 {
                prop_assert!((p.pairwise_pref(0, 0, 1).unwrap() - q.pairwise_pref(0, 0, 1).unwrap()).abs() < 1e-12);
            }
            let w = vec![1.0 / p.num_contexts() as f64; p.num_contexts()];
            let r = TabularPolicy::uniform(p.num_contexts(), p.num_responses());
            let a = kl_divergence(&p, &r, &w).unwrap();
            let b = kl_divergence(&q, &r, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.max(1.0));
        }

        #[test]
        fn grad_log_prob_rows_sum_to_zero(p in policy_strategy(), y in 0usize..2) {
            let g = p.grad_log_prob(0, y).unwrap();
            prop_assert!(g.row_sum(0).abs() < 1e-12);
        }

        #[test]
        fn kl_nonnegative(p in policy_strategy(), seed in 0u64..1000) {
            let mut q = p.clone();
            for (i, v) in q.logits_mut().as_mut_slice().iter_mut().enumerate() {
                *v = ((seed as f64 + i as f64) * 1.7).sin() * 5.0;
            }
            let w = vec![1.0 / p.num_contexts() as f64; p.num_contexts()];
            prop_assert!(kl_divergence(&p, &q, &w).unwrap() >= 0.0);
        }
    }
}

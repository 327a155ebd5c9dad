//! Scalar numerics shared by every objective.
//!
//! Everything here is written to stay finite when logit gaps reach the
//! hundreds, which is where deterministic-preference runs end up.

/// Numerically stable `log(sum(exp(xs)))`. Returns `-inf` for an empty slice.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Logistic sigmoid, evaluated on the branch that never overflows.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `log(sigmoid(z)) = -softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

/// In-place softmax of a row.
pub fn softmax_in_place(row: &mut [f64]) {
    let lse = logsumexp(row);
    for v in row.iter_mut() {
        *v = (*v - lse).exp();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_branches_agree_at_zero_and_saturate() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(50.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn log_sigmoid_is_finite_at_extremes() {
        assert!((log_sigmoid(-50.0) + 50.0).abs() < 1e-12);
        assert!(log_sigmoid(50.0).abs() < 1e-20);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_handles_large_offsets() {
        let xs = [1000.0, 1000.0];
        assert!((logsumexp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[]), f64::NEG_INFINITY);
    }
}

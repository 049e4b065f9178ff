//! Small numeric helpers shared across modules.

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Softmax of `logits`, returned as probabilities.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// KL(Dir(post) || Dir(prior)).
pub fn kl_dirichlet(post: &[f64], prior: &[f64]) -> f64 {
    let sp: f64 = post.iter().sum();
    let s0: f64 = prior.iter().sum();
    let dsp = digamma(sp);
    let mut kl = ln_gamma(sp) - ln_gamma(s0);
    for (a, a0) in post.iter().zip(prior) {
        kl += ln_gamma(*a0) - ln_gamma(*a) + (a - a0) * (digamma(*a) - dsp);
    }
    kl
}

/// E[ln p_i] under Dir(alpha).
pub fn dirichlet_expected_log(alpha: &[f64]) -> Vec<f64> {
    let s = digamma(alpha.iter().sum());
    alpha.iter().map(|a| digamma(*a) - s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logsumexp_matches_naive() {
        let v = [0.1, -2.0, 3.5];
        let naive = v.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((logsumexp(&v) - naive).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn kl_dirichlet_zero_for_equal() {
        let a = [0.5, 2.0, 3.0];
        assert!(kl_dirichlet(&a, &a).abs() < 1e-12);
        assert!(kl_dirichlet(&[4.0, 1.0, 1.0], &a) > 0.0);
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}

//! Log-densities and entropies of the two policy heads.

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((mu, ls), a)| {
            let z = (a - mu) / ls.exp();
            -ls - 0.5 * LN_2PI - 0.5 * z * z
        })
        .sum()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| ls + 0.5 * (LN_2PI + 1.0)).sum()
}

/// Softmax with max-subtraction.
pub fn categorical_probs(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log softmax(logits)[index]` via log-sum-exp.
pub fn categorical_log_prob(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}

pub fn categorical_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

use rand::Rng;
use thiserror::Error;

use crate::canvas::TokenId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("every logit is -inf")]
    DegenerateDistribution,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("logit {index} is NaN or +inf")]
    NonFinite { index: usize },
}

/// Probabilities of `softmax(logits / temperature)`; `-inf` maps to 0.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>, SampleError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(SampleError::BadTemperature(temperature));
    }
    if let Some(index) = logits.iter().position(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(SampleError::NonFinite { index });
    }
    let max = logits
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(SampleError::DegenerateDistribution);
    }
    let mut probs: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Draw one token from `softmax(logits / temperature)`.
///
/// Consumes exactly one `f64` from `rng`.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<TokenId, SampleError> {
    let probs = softmax(logits, temperature)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_nonzero = i;
            acc += p;
            if u < acc {
                return Ok(i as TokenId);
            }
        }
    }
    // rounding left `acc` just below 1
    Ok(last_nonzero as TokenId)
}

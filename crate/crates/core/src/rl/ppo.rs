use super::{check_len, RlError};

/// Per-sample clipped surrogate, negated: `−min(ω Â, clip(ω, 1−δ, 1+δ) Â)`.
pub fn ppo_term(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    -(ratio * advantage).min(clipped * advantage)
}

/// `∂ ppo_term / ∂ω`: zero wherever the clipped branch is the active minimum.
pub fn ppo_ratio_grad(ratio: f64, advantage: f64, clip: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    if ratio * advantage <= clipped * advantage {
        -advantage
    } else {
        0.0
    }
}

fn check_clip(clip: f64) -> Result<(), RlError> {
    if clip > 0.0 {
        Ok(())
    } else {
        Err(RlError::Invalid(format!("clip range must be positive, got {clip}")))
    }
}

pub fn ppo_policy_loss(ratios: &[f64], advantages: &[f64], clip: f64) -> Result<f64, RlError> {
    check_clip(clip)?;
    check_len("ppo advantages", ratios.len(), advantages.len())?;
    if ratios.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = ratios
        .iter()
        .zip(advantages)
        .map(|(r, a)| ppo_term(*r, *a, clip))
        .sum();
    Ok(total / ratios.len() as f64)
}

/// Same loss with `ω = exp(log π − log π_old)`.
pub fn ppo_policy_loss_from_log_probs(
    log_probs: &[f64],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<f64, RlError> {
    check_len("ppo old log-probs", log_probs.len(), old_log_probs.len())?;
    let ratios: Vec<f64> = log_probs
        .iter()
        .zip(old_log_probs)
        .map(|(l, o)| (l - o).exp())
        .collect();
    ppo_policy_loss(&ratios, advantages, clip)
}

/// Mean squared error between predictions and return targets.
pub fn value_loss(predictions: &[f64], targets: &[f64]) -> Result<f64, RlError> {
    check_len("value targets", predictions.len(), targets.len())?;
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(total / predictions.len() as f64)
}

/// `∂ value_loss / ∂ predictions`.
pub fn value_loss_grad(predictions: &[f64], targets: &[f64]) -> Result<Vec<f64>, RlError> {
    check_len("value targets", predictions.len(), targets.len())?;
    let n = predictions.len() as f64;
    Ok(predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| 2.0 * (p - t) / n)
        .collect())
}

/// Shifts and scales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

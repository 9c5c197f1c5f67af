use super::{check_len, RlError};

/// Generalized advantage estimates and return targets.
///
/// `values` carries one extra trailing entry, the bootstrap value of the state
/// after the last reward. `dones[t]` cuts both bootstrapping and the
/// accumulation after step `t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    let n = rewards.len();
    check_len("gae values", n + 1, values.len())?;
    check_len("gae dones", n, dones.len())?;
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(RlError::Invalid(format!(
            "gae needs gamma, lambda in [0, 1], got {gamma}, {lambda}"
        )));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * cont - values[t];
        running = delta + gamma * lambda * cont * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

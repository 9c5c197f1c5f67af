//! Observation corruption: additive Gaussian noise and per-coordinate
//! missingness under MCAR or MAR mechanisms.
//!
//! Under MAR the probability that coordinate `i` is observed is
//!
//! ```text
//! P(w_i = 1) = [1 − min(sigmoid(xᵀβ₁ᵢ + aᵀβ₂ᵢ + β₃ᵢ), ξ)] · (1 − ξ)
//! ```
//!
//! where `x` holds the previous step's observed coordinates (zero where
//! missing) and `a` the action that led to the current state. The missing
//! ratio `η` is the largest missing probability over inputs; `ξ` is tuned so
//! that this maximum matches the configured `η`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::MaskedObservation;
use crate::linalg::Mat;

/// Observation noise standard deviation per unit of noise factor.
pub const NOISE_UNIT: f64 = 0.01;

/// Samples used when calibrating `ξ` against `η`.
pub const CALIBRATION_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorruptionError {
    #[error("missing ratio must lie in [0, 1), got {0}")]
    InvalidEta(f64),
    #[error("noise factor must be non-negative, got {0}")]
    InvalidSigma(f64),
    #[error("mechanism `none` cannot produce missing ratio {0}")]
    NoMechanism(f64),
    #[error("length mismatch: {estimates} estimates vs {truth} latent states")]
    LengthMismatch { estimates: usize, truth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    None,
    Mcar,
    Mar,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::None => "none",
            Mechanism::Mcar => "mcar",
            Mechanism::Mar => "mar",
        })
    }
}

impl FromStr for Mechanism {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Mechanism::None),
            "mcar" => Ok(Mechanism::Mcar),
            "mar" => Ok(Mechanism::Mar),
            other => Err(format!("unknown missing mechanism `{other}`")),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub mechanism: Mechanism,
    pub eta: f64,
    pub sigma: f64,
    /// Bernoulli parameter ξ.
    pub xi: f64,
    /// `β₁ᵢ`, one row per state coordinate.
    pub beta_state: Vec<Vec<f64>>,
    /// `β₂ᵢ`, one row per state coordinate.
    pub beta_action: Vec<Vec<f64>>,
    /// `β₃ᵢ`.
    pub beta_bias: Vec<f64>,
}

impl CorruptionConfig {
    /// Draws the MAR coefficients from `seed` and calibrates `ξ` to `eta`.
    pub fn new(
        mechanism: Mechanism,
        eta: f64,
        sigma: f64,
        state_dim: usize,
        action_dim: usize,
        action_bounds: &(Vec<f64>, Vec<f64>),
        seed: u64,
    ) -> Result<Self, CorruptionError> {
        if !(0.0..1.0).contains(&eta) {
            return Err(CorruptionError::InvalidEta(eta));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(CorruptionError::InvalidSigma(sigma));
        }
        if mechanism == Mechanism::None && eta > 0.0 {
            return Err(CorruptionError::NoMechanism(eta));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal_rows = |n: usize, m: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..m).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        };
        let beta_state = normal_rows(state_dim, state_dim);
        let beta_action = normal_rows(state_dim, action_dim);
        let beta_bias = normal_rows(1, state_dim).pop().unwrap();
        let mut cfg = CorruptionConfig {
            mechanism,
            eta,
            sigma,
            xi: 0.0,
            beta_state,
            beta_action,
            beta_bias,
        };
        cfg.xi = match mechanism {
            Mechanism::None => 0.0,
            Mechanism::Mcar => eta,
            Mechanism::Mar => {
                let samples = calibration_inputs(&cfg, action_bounds, seed ^ 0x5eed_ca1b);
                calibrate_xi(&cfg, &samples, eta)
            }
        };
        Ok(cfg)
    }

    /// No noise, nothing missing.
    pub fn clean(state_dim: usize, action_dim: usize) -> Self {
        CorruptionConfig {
            mechanism: Mechanism::None,
            eta: 0.0,
            sigma: 0.0,
            xi: 0.0,
            beta_state: vec![vec![0.0; state_dim]; state_dim],
            beta_action: vec![vec![0.0; action_dim]; state_dim],
            beta_bias: vec![0.0; state_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.beta_bias.len()
    }

    pub fn noise_std(&self) -> f64 {
        self.sigma * NOISE_UNIT
    }

    /// `Σε = (σ · 0.01)² I`.
    pub fn noise_cov(&self) -> Mat {
        let s = self.noise_std();
        Mat::identity(self.state_dim()).scale(s * s)
    }

    /// MAR observation probability for coordinate `i`.
    pub fn mar_observe_prob(&self, i: usize, prev_observed: &[f64], action: &[f64]) -> f64 {
        self.mar_observe_prob_with_xi(i, prev_observed, action, self.xi)
    }

    fn mar_observe_prob_with_xi(
        &self,
        i: usize,
        prev_observed: &[f64],
        action: &[f64],
        xi: f64,
    ) -> f64 {
        let z: f64 = prev_observed
            .iter()
            .zip(&self.beta_state[i])
            .map(|(x, b)| x * b)
            .sum::<f64>()
            + action
                .iter()
                .zip(&self.beta_action[i])
                .map(|(x, b)| x * b)
                .sum::<f64>()
            + self.beta_bias[i];
        (1.0 - sigmoid(z).min(xi)) * (1.0 - xi)
    }

    /// Probability that coordinate `i` is observed under the configured
    /// mechanism.
    pub fn observe_prob(&self, i: usize, prev_observed: &[f64], action: &[f64]) -> f64 {
        match self.mechanism {
            Mechanism::None => 1.0,
            Mechanism::Mcar => 1.0 - self.xi,
            Mechanism::Mar => self.mar_observe_prob(i, prev_observed, action),
        }
    }

    /// `x = (s + ε) ⊙ w`. `prev_observed` is the previous observation with
    /// missing coordinates zero-filled; the latent state only enters through
    /// the noisy value, never through the mask.
    pub fn corrupt<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        prev_observed: &[f64],
        action_prev: &[f64],
        rng: &mut R,
    ) -> MaskedObservation {
        let std = self.noise_std();
        let noisy: Vec<f64> = state
            .iter()
            .map(|s| s + std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mask: Vec<bool> = (0..state.len())
            .map(|i| {
                let u: f64 = rng.random();
                u < self.observe_prob(i, prev_observed, action_prev)
            })
            .collect();
        MaskedObservation::new(&noisy, &mask)
    }

    /// Monte-Carlo estimate of `max P(w_i = 0)` over coordinates and the
    /// sampled inputs.
    pub fn max_missing_prob(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        max_missing_with_xi(self, samples, self.xi)
    }
}

fn max_missing_with_xi(cfg: &CorruptionConfig, samples: &[(Vec<f64>, Vec<f64>)], xi: f64) -> f64 {
    match cfg.mechanism {
        Mechanism::None => 0.0,
        Mechanism::Mcar => xi,
        Mechanism::Mar => {
            let mut worst = 0.0_f64;
            for (x, a) in samples {
                for i in 0..cfg.state_dim() {
                    worst = worst.max(1.0 - cfg.mar_observe_prob_with_xi(i, x, a, xi));
                }
            }
            worst
        }
    }
}

/// Inputs for calibration: standard-normal previous observations with each
/// coordinate missing (zero) half the time, actions uniform in bounds.
pub fn calibration_inputs(
    cfg: &CorruptionConfig,
    action_bounds: &(Vec<f64>, Vec<f64>),
    seed: u64,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.state_dim();
    let (lo, hi) = action_bounds;
    (0..CALIBRATION_SAMPLES)
        .map(|_| {
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let v: f64 = rng.sample(StandardNormal);
                    if rng.random::<bool>() {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
            let a: Vec<f64> = lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l + (h - l) * rng.random::<f64>())
                .collect();
            (x, a)
        })
        .collect()
}

/// Bisection for `ξ` such that the sampled maximum missing probability equals
/// `eta`.
fn calibrate_xi(cfg: &CorruptionConfig, samples: &[(Vec<f64>, Vec<f64>)], eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if max_missing_with_xi(cfg, samples, mid) < eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Stateful corruption stream for one environment instance.
#[derive(Debug, Clone)]
pub struct ObservationChannel {
    config: CorruptionConfig,
    prev_observed: Vec<f64>,
    rng: ChaCha8Rng,
}

impl ObservationChannel {
    pub fn new(config: CorruptionConfig, seed: u64) -> Self {
        let d = config.state_dim();
        ObservationChannel {
            config,
            prev_observed: vec![0.0; d],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &CorruptionConfig {
        &self.config
    }

    /// Starts a new episode: nothing has been observed yet.
    pub fn reset(&mut self, seed: u64) {
        self.prev_observed.iter_mut().for_each(|x| *x = 0.0);
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn observe(&mut self, state: &[f64], action_prev: &[f64]) -> MaskedObservation {
        let obs = self
            .config
            .corrupt(state, &self.prev_observed, action_prev, &mut self.rng);
        self.prev_observed = obs.zero_filled();
        obs
    }
}

/// Mean over time of `‖estimate − state‖² / D`.
pub fn imputed_state_mse(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, CorruptionError> {
    if estimates.len() != truth.len() {
        return Err(CorruptionError::LengthMismatch {
            estimates: estimates.len(),
            truth: truth.len(),
        });
    }
    if estimates.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = estimates
        .iter()
        .zip(truth)
        .map(|(e, s)| {
            e.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64
        })
        .sum();
    Ok(total / estimates.len() as f64)
}

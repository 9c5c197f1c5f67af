use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::belief::{belief_features, BeliefFilter, MaskedObservation};
use crate::dynamics::{Dynamics, ModelGrads, TransitionModel};
use crate::env::Environment;
use crate::linalg::Mat;
use crate::nn::{Activation, Checkpoint, Mlp, NnError, Tape};

use super::{check_len, RlError};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentKind {
    /// Belief filter; acts on `(μ, diag Σ)`.
    #[serde(rename = "bi")]
    Bi,
    /// Fill-adjacent imputation.
    #[serde(rename = "fa")]
    Fa,
    /// Exception imputation with the transition model's mean prediction.
    #[serde(rename = "ei")]
    Ei,
    /// Acts on the latent state.
    #[serde(rename = "ppo-oracle")]
    Oracle,
}

impl AgentKind {
    pub const ALL: [AgentKind; 4] = [AgentKind::Bi, AgentKind::Fa, AgentKind::Ei, AgentKind::Oracle];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Bi => "bi",
            AgentKind::Fa => "fa",
            AgentKind::Ei => "ei",
            AgentKind::Oracle => "ppo-oracle",
        }
    }

    /// Whether the transition model is trained alongside the policy.
    pub fn uses_model(self) -> bool {
        matches!(self, AgentKind::Bi | AgentKind::Ei)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AgentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown agent `{s}` (expected bi, fa, ei or ppo-oracle)"))
    }
}

/// `log N(u | mean, diag(exp(log_std))²)`.
pub fn diag_gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((u, m), ls)| {
            let z = (u - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Replaces missing coordinates with the most recent observed value and
/// records the observed ones in `last`.
pub fn fill_adjacent(obs: &MaskedObservation, last: &mut [f64]) -> Vec<f64> {
    for (i, slot) in last.iter_mut().enumerate() {
        if let Some(v) = obs.get(i) {
            *slot = v;
        }
    }
    last.to_vec()
}

/// Replaces missing coordinates with `prediction`.
pub fn exception_imputation(obs: &MaskedObservation, prediction: &[f64]) -> Vec<f64> {
    prediction
        .iter()
        .enumerate()
        .map(|(i, p)| obs.get(i).unwrap_or(*p))
        .collect()
}

/// State estimate handed to the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    /// Belief mean or imputed state.
    pub point: Vec<f64>,
    /// Belief variances, present for the belief agent only.
    pub spread: Option<Vec<f64>>,
}

/// Per-episode state estimator.
#[derive(Debug, Clone)]
pub enum Tracker {
    Belief(BeliefFilter),
    FillAdjacent { last: Vec<f64> },
    Predictive { prediction: Vec<f64>, imputed: Vec<f64> },
    TrueState,
}

impl Tracker {
    pub fn new(kind: AgentKind, model: &TransitionModel, noise_cov: &Mat) -> Self {
        let d = model.state_dim();
        match kind {
            AgentKind::Bi => Tracker::Belief(BeliefFilter::new(model, noise_cov.clone())),
            AgentKind::Fa => Tracker::FillAdjacent { last: vec![0.0; d] },
            AgentKind::Ei => Tracker::Predictive {
                prediction: model.initial_belief().mean,
                imputed: vec![0.0; d],
            },
            AgentKind::Oracle => Tracker::TrueState,
        }
    }

    pub fn observe(
        &mut self,
        obs: &MaskedObservation,
        true_state: &[f64],
    ) -> Result<Estimate, RlError> {
        Ok(match self {
            Tracker::Belief(f) => {
                let post = f.observe(obs)?;
                let features = belief_features(post);
                let d = obs.dim();
                Estimate {
                    point: features[..d].to_vec(),
                    spread: Some(features[d..].to_vec()),
                }
            }
            Tracker::FillAdjacent { last } => Estimate {
                point: fill_adjacent(obs, last),
                spread: None,
            },
            Tracker::Predictive {
                prediction,
                imputed,
            } => {
                *imputed = exception_imputation(obs, prediction);
                Estimate {
                    point: imputed.clone(),
                    spread: None,
                }
            }
            Tracker::TrueState => Estimate {
                point: true_state.to_vec(),
                spread: None,
            },
        })
    }

    pub fn advance(&mut self, action: &[f64], model: &TransitionModel) -> Result<(), RlError> {
        match self {
            Tracker::Belief(f) => {
                f.advance(action, model)?;
            }
            Tracker::Predictive {
                prediction,
                imputed,
            } => {
                *prediction = model.transition(imputed, action).mean;
            }
            Tracker::FillAdjacent { .. } | Tracker::TrueState => {}
        }
        Ok(())
    }
}

/// Policy, value function and transition model sharing one trunk layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub kind: AgentKind,
    pub model: TransitionModel,
    /// `[hidden, hidden, A]`, output is the pre-squash action mean.
    pub policy_head: Mlp,
    /// `[hidden, hidden, 1]`.
    pub value_head: Mlp,
    pub log_std: Vec<f64>,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
}

/// Gradient buffers in the layout of [`Agent::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub model: ModelGrads,
    pub policy_head: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value_head: Vec<f64>,
}

impl AgentGrads {
    pub fn zeros_like(agent: &Agent) -> Self {
        AgentGrads {
            model: ModelGrads::zeros_like(&agent.model),
            policy_head: vec![0.0; agent.policy_head.param_count()],
            log_std: vec![0.0; agent.log_std.len()],
            value_head: vec![0.0; agent.value_head.param_count()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.model.flatten();
        v.extend_from_slice(&self.policy_head);
        v.extend_from_slice(&self.log_std);
        v.extend_from_slice(&self.value_head);
        v
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 7] {
        [
            &mut self.model.trunk,
            &mut self.model.head,
            &mut self.model.init_mean,
            &mut self.model.init_factor,
            &mut self.policy_head,
            &mut self.log_std,
            &mut self.value_head,
        ]
    }
}

/// Forward pass kept for backpropagation.
pub(crate) struct AgentTape {
    pub trunk: Tape,
    pub policy: Tape,
    pub value: Tape,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        kind: AgentKind,
        env: &dyn Environment,
        hidden: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let (d, a) = (env.state_dim(), env.action_dim());
        let model = TransitionModel::new(d, a, hidden, env.input_scaling(), rng);
        let policy_head = Mlp::orthogonal(
            &[hidden, hidden, a],
            Activation::Tanh,
            Activation::Identity,
            2f64.sqrt(),
            0.01,
            rng,
        );
        let value_head = Mlp::orthogonal(
            &[hidden, hidden, 1],
            Activation::Tanh,
            Activation::Identity,
            2f64.sqrt(),
            1.0,
            rng,
        );
        let (action_low, action_high) = env.action_bounds();
        Agent {
            kind,
            model,
            policy_head,
            value_head,
            log_std: vec![init_log_std; a],
            action_low,
            action_high,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    pub fn tracker(&self, noise_cov: &Mat) -> Tracker {
        Tracker::new(self.kind, &self.model, noise_cov)
    }

    /// Trunk input for an estimate.
    pub fn input(&self, est: &Estimate) -> Vec<f64> {
        match &est.spread {
            Some(var) => {
                let mut f = est.point.clone();
                f.extend_from_slice(var);
                self.model.features_input(&f)
            }
            None => self.model.state_input(&est.point),
        }
    }

    pub fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    pub(crate) fn forward(&self, input: &[f64]) -> Result<AgentTape, NnError> {
        let trunk = self.model.trunk.forward_tape(input)?;
        let policy = self.policy_head.forward_tape(trunk.output())?;
        let value = self.value_head.forward_tape(trunk.output())?;
        Ok(AgentTape {
            trunk,
            policy,
            value,
        })
    }

    /// Accumulates head and trunk parameter gradients for output gradients
    /// `d_mean` (policy) and `d_value`.
    pub(crate) fn backward(
        &self,
        tape: &AgentTape,
        d_mean: &[f64],
        d_value: f64,
        grads: &mut AgentGrads,
    ) -> Result<(), NnError> {
        let mut dh = self
            .policy_head
            .backward_tape(&tape.policy, d_mean, &mut grads.policy_head)?;
        let dv = self
            .value_head
            .backward_tape(&tape.value, &[d_value], &mut grads.value_head)?;
        dh.iter_mut().zip(&dv).for_each(|(a, b)| *a += b);
        self.model
            .trunk
            .backward_tape(&tape.trunk, &dh, &mut grads.model.trunk)?;
        Ok(())
    }

    /// Pre-squash action mean.
    pub fn action_mean(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let h = self.model.trunk.infer(input)?;
        self.policy_head.infer(&h)
    }

    pub fn value(&self, input: &[f64]) -> Result<f64, NnError> {
        let h = self.model.trunk.infer(input)?;
        Ok(self.value_head.infer(&h)?[0])
    }

    /// Maps an unbounded sample into the action box via `tanh`.
    pub fn squash(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(u, (lo, hi))| lo + 0.5 * (u.tanh() + 1.0) * (hi - lo))
            .collect()
    }

    /// Samples (or takes the mode of) the policy; returns the raw sample, the
    /// environment action and the log-probability of the raw sample.
    pub fn act<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<(Vec<f64>, Vec<f64>, f64), NnError> {
        let mean = self.action_mean(input)?;
        let log_std = self.clamped_log_std();
        let u: Vec<f64> = if deterministic {
            mean.clone()
        } else {
            mean.iter()
                .zip(&log_std)
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let logp = diag_gaussian_log_prob(&u, &mean, &log_std);
        let action = self.squash(&u);
        Ok((u, action, logp))
    }

    pub fn param_count(&self) -> usize {
        self.model.param_count()
            + self.policy_head.param_count()
            + self.log_std.len()
            + self.value_head.param_count()
    }

    /// Model parameters, then policy head, log-std, value head.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.model.flat_params();
        p.extend_from_slice(self.policy_head.params());
        p.extend_from_slice(&self.log_std);
        p.extend_from_slice(self.value_head.params());
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<(), RlError> {
        check_len("Agent::set_flat_params", self.param_count(), p.len())?;
        let (m, rest) = p.split_at(self.model.param_count());
        let (ph, rest) = rest.split_at(self.policy_head.param_count());
        let (ls, vh) = rest.split_at(self.log_std.len());
        self.model.set_flat_params(m)?;
        self.policy_head.set_params(ph)?;
        self.log_std.copy_from_slice(ls);
        self.value_head.set_params(vh)?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.write_checkpoint(&mut ck);
        ck.push_mlp("policy_head", &self.policy_head);
        ck.push_vec("log_std", &self.log_std);
        ck.push_mlp("value_head", &self.value_head);
        ck
    }

    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), NnError> {
        self.model.read_checkpoint(ck)?;
        ck.load_mlp("policy_head", &mut self.policy_head)?;
        ck.load_vec("log_std", &mut self.log_std)?;
        ck.load_mlp("value_head", &mut self.value_head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::LinearGaussianEnv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn agent(kind: AgentKind) -> Agent {
        let env = LinearGaussianEnv::default();
        Agent::new(kind, &env, 8, 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn fill_adjacent_carries_last_value() {
        let mut last = vec![0.0; 2];
        fill_adjacent(&MaskedObservation::new(&[1.0, 2.0], &[true, true]), &mut last);
        let x = fill_adjacent(&MaskedObservation::new(&[5.0, 3.0], &[true, true]), &mut last);
        assert_eq!(x, vec![5.0, 3.0]);
        let x = fill_adjacent(&MaskedObservation::new(&[0.0, 4.0], &[false, true]), &mut last);
        assert_eq!(x, vec![5.0, 4.0]);
    }

    #[test]
    fn fill_adjacent_starts_at_zero() {
        let mut last = vec![0.0; 2];
        let x = fill_adjacent(&MaskedObservation::all_missing(2), &mut last);
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn no_missing_passes_through() {
        let obs = MaskedObservation::full(&[0.3, -0.7]);
        let mut last = vec![9.0; 2];
        assert_eq!(fill_adjacent(&obs, &mut last), vec![0.3, -0.7]);
        assert_eq!(exception_imputation(&obs, &[9.0, 9.0]), vec![0.3, -0.7]);
    }

    #[test]
    fn squash_respects_bounds() {
        let a = agent(AgentKind::Bi);
        let x = a.squash(&[-50.0]);
        assert!(x[0] >= -1.0 && x[0] <= 1.0);
        assert_eq!(a.squash(&[0.0]), vec![0.0]);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut a = agent(AgentKind::Bi);
        let mut p = a.flat_params();
        p.iter_mut().enumerate().for_each(|(i, x)| *x += i as f64 * 1e-3);
        a.set_flat_params(&p).unwrap();
        assert_eq!(a.flat_params(), p);
        assert_eq!(AgentGrads::zeros_like(&a).flatten().len(), p.len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = agent(AgentKind::Ei);
        let mut b = agent(AgentKind::Ei);
        b.log_std = vec![-0.5];
        b.model.trunk.params_mut()[0] = 3.0;
        b.load_checkpoint(&Checkpoint::from_json(&a.checkpoint().to_json()).unwrap())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_prob_standard_normal() {
        let lp = diag_gaussian_log_prob(&[0.0], &[0.0], &[0.0]);
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }
}

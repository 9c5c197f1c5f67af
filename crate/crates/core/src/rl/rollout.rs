use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::MaskedObservation;
use crate::corruption::{imputed_state_mse, ObservationChannel};
use crate::env::Environment;

use super::{Agent, RlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

/// How a recorded segment stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentEnd {
    /// The environment reached an absorbing state.
    Terminal,
    /// The environment's step limit was hit.
    Truncated,
    /// The collection budget ran out mid-episode.
    Cutoff,
}

/// One recorded episode (or episode prefix).
///
/// Observations, latent states and estimates have one more entry than the
/// per-action vectors: the observation after the final action.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub observations: Vec<MaskedObservation>,
    pub states: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    pub raw_actions: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub end: SegmentEnd,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn imputed_mse(&self) -> f64 {
        imputed_state_mse(&self.estimates, &self.states).unwrap_or(f64::NAN)
    }
}

/// Filter-act loop: update the estimate, act on it, step, corrupt, advance.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<R: Rng + ?Sized>(
    agent: &Agent,
    env: &mut dyn Environment,
    channel: &mut ObservationChannel,
    env_seed: u64,
    mask_seed: u64,
    max_len: usize,
    mode: ActionMode,
    rng: &mut R,
) -> Result<Episode, RlError> {
    let at = |step: usize| move |e: RlError| RlError::AtStep {
        step,
        source: Box::new(e),
    };
    let noise_cov = channel.config().noise_cov();
    let mut tracker = agent.tracker(&noise_cov);
    let state = env.reset(env_seed);
    channel.reset(mask_seed);
    let obs = channel.observe(&state, &vec![0.0; agent.action_dim()]);
    let mut est = tracker.observe(&obs, &state).map_err(at(0))?;

    let mut ep = Episode {
        observations: vec![obs],
        states: vec![state],
        estimates: vec![est.point.clone()],
        raw_actions: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        log_probs: Vec::new(),
        end: SegmentEnd::Cutoff,
    };
    for t in 0..max_len {
        let input = agent.input(&est);
        let (u, action, logp) = agent
            .act(&input, mode == ActionMode::Deterministic, rng)
            .map_err(|e| at(t)(e.into()))?;
        let step = env.step(&action);
        let obs = channel.observe(&step.state, &action);
        tracker.advance(&action, &agent.model).map_err(at(t))?;
        est = tracker.observe(&obs, &step.state).map_err(at(t + 1))?;

        ep.raw_actions.push(u);
        ep.actions.push(action);
        ep.rewards.push(step.reward);
        ep.log_probs.push(logp);
        ep.observations.push(obs);
        ep.estimates.push(est.point.clone());
        ep.states.push(step.state);
        if step.terminal {
            ep.end = SegmentEnd::Terminal;
            break;
        }
        if step.truncated {
            ep.end = SegmentEnd::Truncated;
            break;
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{CorruptionConfig, Mechanism};
    use crate::env::LinearGaussianEnv;
    use crate::rl::AgentKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: AgentKind) -> (Agent, LinearGaussianEnv) {
        let env = LinearGaussianEnv::default();
        let agent = Agent::new(kind, &env, 16, 0.0, &mut ChaCha8Rng::seed_from_u64(1));
        (agent, env)
    }

    #[test]
    fn deterministic_clean_episode_is_reproducible() {
        let (agent, mut env) = setup(AgentKind::Bi);
        let cfg = CorruptionConfig::clean(2, 1);
        let mut run = || {
            let mut ch = ObservationChannel::new(cfg.clone(), 0);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            run_episode(&agent, &mut env, &mut ch, 3, 4, 1000, ActionMode::Deterministic, &mut rng)
                .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.total_reward(), b.total_reward());
        assert_eq!(a.len(), 100);
        assert_eq!(a.end, SegmentEnd::Truncated);
        assert_eq!(a.observations.len(), 101);
    }

    #[test]
    fn all_missing_stream_completes() {
        let (agent, mut env) = setup(AgentKind::Bi);
        let mut cfg = CorruptionConfig::new(
            Mechanism::Mcar,
            0.5,
            1.0,
            2,
            1,
            &(vec![-1.0], vec![1.0]),
            0,
        )
        .unwrap();
        cfg.xi = 1.0;
        let mut ch = ObservationChannel::new(cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = run_episode(&agent, &mut env, &mut ch, 0, 0, 50, ActionMode::Stochastic, &mut rng)
            .unwrap();
        assert!(ep.observations.iter().all(|o| o.missing_count() == 2));
        assert_eq!(ep.len(), 50);
        assert_eq!(ep.end, SegmentEnd::Cutoff);
        assert!(ep.total_reward().is_finite());
        // the first estimate is the model's initial belief mean
        assert_eq!(ep.estimates[0], agent.model.init_mean);
    }

    #[test]
    fn oracle_estimates_are_true_states() {
        let (agent, mut env) = setup(AgentKind::Oracle);
        let cfg = CorruptionConfig::new(
            Mechanism::Mcar,
            0.3,
            1.0,
            2,
            1,
            &(vec![-1.0], vec![1.0]),
            0,
        )
        .unwrap();
        let mut ch = ObservationChannel::new(cfg, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ep = run_episode(&agent, &mut env, &mut ch, 0, 0, 20, ActionMode::Stochastic, &mut rng)
            .unwrap();
        assert_eq!(ep.imputed_mse(), 0.0);
    }
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{CorruptionConfig, Mechanism, ObservationChannel};
use crate::dynamics::{model_loss_and_grad, ModelGrads, ModelTerm};
use crate::env::EnvName;
use crate::linalg::Mat;
use crate::nn::{clip_grad_norm, AdamConfig, AdamState};

use super::agent::{diag_gaussian_log_prob, Agent, AgentGrads, AgentKind, LOG_STD_MAX, LOG_STD_MIN};
use super::gae::gae;
use super::ppo::{normalize_advantages, ppo_ratio_grad, ppo_term};
use super::rollout::{run_episode, ActionMode, Episode, SegmentEnd};
use super::seeds::derive_seed;
use super::RlError;

/// What the gradient-norm bound applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradClip {
    /// One bound on the full joint gradient.
    Joint,
    /// Separate bounds on the policy/value gradient and on the model gradient.
    PerTerm,
}

/// Optimisation and rollout settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    /// Linearly decay the learning rate to zero over training.
    pub lr_anneal: bool,
    pub adam_eps: f64,
    pub value_coef: f64,
    pub model_coef: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub minibatch: usize,
    /// Environment steps collected per iteration (over all actors).
    pub horizon: usize,
    /// Gradient-norm bound; zero disables clipping.
    pub max_grad_norm: f64,
    pub grad_clip: GradClip,
    pub eval_episodes: usize,
    pub actors: usize,
    pub reward_norm: bool,
    pub init_log_std: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            lr_anneal: true,
            adam_eps: 1e-5,
            value_coef: 1.0,
            model_coef: 1.0,
            hidden: 64,
            epochs: 10,
            minibatch: 64,
            horizon: 2048,
            max_grad_norm: 0.5,
            grad_clip: GradClip::PerTerm,
            eval_episodes: 10,
            actors: 1,
            reward_norm: true,
            init_log_std: 0.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(format!("{name} must lie in [0, 1], got {v}"))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        positive("clip", self.clip)?;
        positive("lr", self.lr)?;
        positive("adam_eps", self.adam_eps)?;
        for (name, v) in [
            ("value_coef", self.value_coef),
            ("model_coef", self.model_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("epochs", self.epochs),
            ("minibatch", self.minibatch),
            ("horizon", self.horizon),
            ("actors", self.actors),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.actors > self.horizon {
            return Err("actors cannot exceed horizon".into());
        }
        if !self.init_log_std.is_finite() {
            return Err("init_log_std must be finite".into());
        }
        Ok(())
    }
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub env: EnvName,
    pub agent: AgentKind,
    pub mechanism: Mechanism,
    pub eta: f64,
    pub sigma: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub hyper: Hyperparams,
}

impl RunSpec {
    pub fn corruption(&self) -> Result<CorruptionConfig, RlError> {
        let env = self.env.build();
        let mechanism = if self.eta == 0.0 {
            Mechanism::None
        } else {
            self.mechanism
        };
        Ok(CorruptionConfig::new(
            mechanism,
            self.eta,
            self.sigma,
            env.state_dim(),
            env.action_dim(),
            &env.action_bounds(),
            derive_seed(self.seed, "corruption", 0),
        )?)
    }

    pub fn iterations(&self) -> usize {
        self.timesteps / self.hyper.horizon
    }

    pub fn initial_agent(&self) -> Agent {
        let env = self.env.build();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "init", 0));
        Agent::new(
            self.agent,
            env.as_ref(),
            self.hyper.hidden,
            self.hyper.init_log_std,
            &mut rng,
        )
    }
}

/// Running variance of a scalar stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningStd {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStd {
    pub fn push(&mut self, x: f64) {
        self.count += 1.0;
        let d = x - self.mean;
        self.mean += d / self.count;
        self.m2 += d * (x - self.mean);
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            self.m2 / self.count
        }
    }

    pub fn std(&self) -> f64 {
        (self.variance() + 1e-8).sqrt()
    }
}

/// Flattened training samples for one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub raw_actions: Vec<Vec<f64>>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Model-likelihood terms owned by each sample.
    pub model_terms: Vec<Vec<ModelTerm>>,
    pub imputed_mse: f64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Re-runs the estimator over each episode with the current parameters and
/// computes values, advantages, returns and model terms.
pub fn prepare_batch(
    agent: &Agent,
    episodes: &[Episode],
    rewards: &[Vec<f64>],
    noise_cov: &Mat,
    gamma: f64,
    lambda: f64,
) -> Result<Batch, RlError> {
    super::check_len("prepare_batch rewards", episodes.len(), rewards.len())?;
    let total: usize = episodes.iter().map(Episode::len).sum();
    let mut b = Batch {
        inputs: Vec::with_capacity(total),
        raw_actions: Vec::with_capacity(total),
        old_log_probs: Vec::with_capacity(total),
        values: Vec::with_capacity(total),
        advantages: Vec::with_capacity(total),
        returns: Vec::with_capacity(total),
        model_terms: Vec::with_capacity(total),
        imputed_mse: 0.0,
    };
    let mut sq_err = 0.0;
    let mut count = 0usize;
    for (ep, rw) in episodes.iter().zip(rewards) {
        let n = ep.len();
        super::check_len("episode rewards", n, rw.len())?;
        let mut tracker = agent.tracker(noise_cov);
        let mut inputs = Vec::with_capacity(n + 1);
        let mut points = Vec::with_capacity(n + 1);
        for t in 0..=n {
            if t > 0 {
                tracker.advance(&ep.actions[t - 1], &agent.model)?;
            }
            let est = tracker.observe(&ep.observations[t], &ep.states[t])?;
            let d = est.point.len() as f64;
            sq_err += est
                .point
                .iter()
                .zip(&ep.states[t])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / d;
            count += 1;
            inputs.push(agent.input(&est));
            points.push(est.point);
        }
        let mut values = Vec::with_capacity(n + 1);
        for x in &inputs {
            values.push(agent.value(x)?);
        }
        let mut dones = vec![false; n];
        if ep.end == SegmentEnd::Terminal {
            if let Some(last) = dones.last_mut() {
                *last = true;
            }
        }
        let (adv, ret) = gae(rw, &values, &dones, gamma, lambda)?;

        for t in 0..n {
            let mut terms = Vec::with_capacity(2);
            if agent.kind.uses_model() {
                if t == 0 {
                    terms.push(ModelTerm::Initial {
                        obs: ep.observations[0].clone(),
                    });
                }
                terms.push(ModelTerm::Transition {
                    belief_mean: points[t].clone(),
                    action: ep.actions[t].clone(),
                    next_obs: ep.observations[t + 1].clone(),
                });
            }
            b.model_terms.push(terms);
        }
        values.pop();
        inputs.pop();
        b.inputs.extend(inputs);
        b.raw_actions.extend(ep.raw_actions.iter().cloned());
        b.old_log_probs.extend_from_slice(&ep.log_probs);
        b.values.extend(values);
        b.advantages.extend(adv);
        b.returns.extend(ret);
    }
    b.imputed_mse = if count > 0 {
        sq_err / count as f64
    } else {
        0.0
    };
    Ok(b)
}

/// Loss components and diagnostics of one minibatch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub objective: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub model_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// `J = policy_loss + λ_v value_loss + λ_p model_loss` over the samples in
/// `idx`, with its gradient in the layout of [`Agent::flat_params`].
pub fn joint_objective(
    agent: &Agent,
    batch: &Batch,
    idx: &[usize],
    hyper: &Hyperparams,
    noise_cov: &Mat,
) -> Result<(StepStats, AgentGrads), RlError> {
    let (stats, mut grads, model) = objective_parts(agent, batch, idx, hyper, noise_cov)?;
    add_model_grads(&mut grads, &model);
    Ok((stats, grads))
}

fn add_model_grads(grads: &mut AgentGrads, model: &ModelGrads) {
    for (dst, src) in grads.groups_mut().into_iter().zip(model_groups(model)) {
        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}

fn model_groups(m: &ModelGrads) -> [&[f64]; 4] {
    [&m.trunk, &m.head, &m.init_mean, &m.init_factor]
}

/// Policy/value gradient and model gradient kept apart.
fn objective_parts(
    agent: &Agent,
    batch: &Batch,
    idx: &[usize],
    hyper: &Hyperparams,
    noise_cov: &Mat,
) -> Result<(StepStats, AgentGrads, ModelGrads), RlError> {
    let mut grads = AgentGrads::zeros_like(agent);
    let mut model_grads = ModelGrads::zeros_like(&agent.model);
    let mut stats = StepStats::default();
    if idx.is_empty() {
        return Ok((stats, grads, model_grads));
    }
    let inv_n = 1.0 / idx.len() as f64;
    let log_std = agent.clamped_log_std();
    let mut d_log_std = vec![0.0; log_std.len()];
    for &i in idx {
        let tape = agent.forward(&batch.inputs[i])?;
        let mean = tape.policy.output();
        let u = &batch.raw_actions[i];
        let logp = diag_gaussian_log_prob(u, mean, &log_std);
        let ratio = (logp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        stats.policy_loss += ppo_term(ratio, adv, hyper.clip) * inv_n;
        stats.approx_kl += (batch.old_log_probs[i] - logp) * inv_n;
        if (ratio - 1.0).abs() > hyper.clip {
            stats.clip_fraction += inv_n;
        }
        let d_logp = ppo_ratio_grad(ratio, adv, hyper.clip) * ratio * inv_n;
        let d_mean: Vec<f64> = u
            .iter()
            .zip(mean)
            .zip(&log_std)
            .map(|((u, m), ls)| d_logp * (u - m) * (-2.0 * ls).exp())
            .collect();
        for (j, ((u, m), ls)) in u.iter().zip(mean).zip(&log_std).enumerate() {
            let z2 = (u - m) * (u - m) * (-2.0 * ls).exp();
            d_log_std[j] += d_logp * (z2 - 1.0);
        }
        let v = tape.value.output()[0];
        let err = v - batch.returns[i];
        stats.value_loss += err * err * inv_n;
        let d_value = hyper.value_coef * 2.0 * err * inv_n;
        agent.backward(&tape, &d_mean, d_value, &mut grads)?;
    }
    for (j, raw) in agent.log_std.iter().enumerate() {
        if (LOG_STD_MIN..=LOG_STD_MAX).contains(raw) {
            grads.log_std[j] += d_log_std[j];
        }
    }

    if agent.kind.uses_model() && hyper.model_coef > 0.0 {
        let terms: Vec<ModelTerm> = idx
            .iter()
            .flat_map(|&i| batch.model_terms[i].iter().cloned())
            .collect();
        if !terms.is_empty() {
            stats.model_loss = model_loss_and_grad(
                &agent.model,
                &terms,
                noise_cov,
                Some((&mut model_grads, hyper.model_coef)),
            )?;
        }
    }
    stats.objective =
        stats.policy_loss + hyper.value_coef * stats.value_loss + hyper.model_coef * stats.model_loss;
    Ok((stats, grads, model_grads))
}

/// One Adam step on the joint objective.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    agent: &mut Agent,
    adam: &mut AdamState,
    batch: &Batch,
    idx: &[usize],
    hyper: &Hyperparams,
    noise_cov: &Mat,
    lr: f64,
    iteration: usize,
) -> Result<StepStats, RlError> {
    let (stats, mut grads, mut model_grads) = objective_parts(agent, batch, idx, hyper, noise_cov)?;
    for (what, value) in [
        ("objective", stats.objective),
        ("policy loss", stats.policy_loss),
        ("value loss", stats.value_loss),
        ("model loss", stats.model_loss),
    ] {
        if !value.is_finite() {
            return Err(RlError::NonFinite {
                what,
                iteration,
                value,
            });
        }
    }
    let check = |norm: f64| {
        if norm.is_finite() {
            Ok(())
        } else {
            Err(RlError::NonFinite {
                what: "gradient norm",
                iteration,
                value: norm,
            })
        }
    };
    let bound = if hyper.max_grad_norm > 0.0 {
        hyper.max_grad_norm
    } else {
        f64::INFINITY
    };
    match hyper.grad_clip {
        GradClip::Joint => {
            add_model_grads(&mut grads, &model_grads);
            check(clip_grad_norm(&mut grads.groups_mut(), bound))?;
        }
        GradClip::PerTerm => {
            check(clip_grad_norm(&mut grads.groups_mut(), bound))?;
            let [a, b, c, d] = [
                &mut model_grads.trunk,
                &mut model_grads.head,
                &mut model_grads.init_mean,
                &mut model_grads.init_factor,
            ];
            check(clip_grad_norm(&mut [a, b, c, d], bound))?;
            add_model_grads(&mut grads, &model_grads);
        }
    }
    let mut params = agent.flat_params();
    adam.step_with_lr(&mut params, &grads.flatten(), lr)?;
    agent.set_flat_params(&params)?;
    agent
        .log_std
        .iter_mut()
        .for_each(|l| *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX));
    Ok(stats)
}

/// Deterministic-policy evaluation over a fixed set of episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rewards: Vec<f64>,
    pub imputed_mse: Vec<f64>,
}

impl EvalSummary {
    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }

    pub fn std_reward(&self) -> f64 {
        let m = self.mean_reward();
        if self.rewards.is_empty() {
            return f64::NAN;
        }
        (self.rewards.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / self.rewards.len() as f64)
            .sqrt()
    }

    pub fn mean_imputed_mse(&self) -> f64 {
        mean(&self.imputed_mse)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs `episodes` full deterministic episodes; episode `j` uses the seeds of
/// stream `tag`, index `j`, so repeated calls see the same episodes.
pub fn evaluate(
    agent: &Agent,
    env_name: EnvName,
    corruption: &CorruptionConfig,
    seed: u64,
    tag: &str,
    episodes: usize,
) -> Result<EvalSummary, RlError> {
    let mut env = env_name.build();
    let mut channel = ObservationChannel::new(corruption.clone(), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = EvalSummary {
        rewards: Vec::with_capacity(episodes),
        imputed_mse: Vec::with_capacity(episodes),
    };
    let env_tag = format!("{tag}-env");
    let mask_tag = format!("{tag}-mask");
    for j in 0..episodes as u64 {
        let max_len = env.max_steps();
        let ep = run_episode(
            agent,
            env.as_mut(),
            &mut channel,
            derive_seed(seed, &env_tag, j),
            derive_seed(seed, &mask_tag, j),
            max_len,
            ActionMode::Deterministic,
            &mut rng,
        )?;
        out.rewards.push(ep.total_reward());
        out.imputed_mse.push(ep.imputed_mse());
    }
    Ok(out)
}

/// Per-iteration metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub timesteps: usize,
    pub eval_reward_mean: f64,
    pub eval_reward_std: f64,
    pub eval_imputed_mse: f64,
    /// Mean reward of training episodes that finished this iteration.
    pub train_reward_mean: Option<f64>,
    pub train_imputed_mse: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub model_loss: Option<f64>,
    pub approx_kl: Option<f64>,
    pub clip_fraction: Option<f64>,
    pub lr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub best_agent: Agent,
    pub best_iteration: usize,
    pub records: Vec<IterationRecord>,
}

fn collect(
    agent: &Agent,
    spec: &RunSpec,
    corruption: &CorruptionConfig,
    iteration: usize,
) -> Result<Vec<Episode>, RlError> {
    let actors = spec.hyper.actors;
    let horizon = spec.hyper.horizon;
    let run_actor = |actor: usize| -> Result<Vec<Episode>, RlError> {
        let budget = horizon / actors + usize::from(actor < horizon % actors);
        let actor_seed = derive_seed(spec.seed, "actor", actor as u64);
        let mut env = spec.env.build();
        let mut channel = ObservationChannel::new(corruption.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            actor_seed,
            "policy",
            iteration as u64,
        ));
        let mut out = Vec::new();
        let mut used = 0;
        let mut k = 0u64;
        while used < budget {
            let index = ((iteration as u64) << 24) | k;
            let max_len = (budget - used).min(env.max_steps());
            let ep = run_episode(
                agent,
                env.as_mut(),
                &mut channel,
                derive_seed(actor_seed, "train-env", index),
                derive_seed(actor_seed, "train-mask", index),
                max_len,
                ActionMode::Stochastic,
                &mut rng,
            )?;
            used += ep.len();
            k += 1;
            out.push(ep);
        }
        Ok(out)
    };
    if actors == 1 {
        return run_actor(0);
    }
    let results: Vec<Result<Vec<Episode>, RlError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..actors)
            .map(|a| {
                let f = &run_actor;
                s.spawn(move || f(a))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rollout actor panicked"))
            .collect()
    });
    let mut all = Vec::new();
    for r in results {
        all.extend(r?);
    }
    Ok(all)
}

/// Full training loop. `observer` sees every iteration record (including the
/// initial evaluation at iteration 0) with the current agent and whether it
/// is the best so far; an error from it stops training.
pub fn train<F>(spec: &RunSpec, mut observer: F) -> Result<TrainOutcome, RlError>
where
    F: FnMut(&IterationRecord, &Agent, bool) -> Result<(), String>,
{
    let hyper = &spec.hyper;
    hyper.validate().map_err(RlError::Invalid)?;
    let corruption = spec.corruption()?;
    let noise_cov = corruption.noise_cov();
    let mut agent = spec.initial_agent();
    let mut adam = AdamState::new(
        agent.param_count(),
        AdamConfig {
            lr: hyper.lr,
            eps: hyper.adam_eps,
            ..AdamConfig::default()
        },
    );
    let eval_n = hyper.eval_episodes;
    let iterations = spec.iterations();
    let mut reward_stats = RunningStd::default();
    let mut records = Vec::with_capacity(iterations + 1);

    let ev = evaluate(&agent, spec.env, &corruption, spec.seed, "eval", eval_n)?;
    let rec = IterationRecord {
        iteration: 0,
        timesteps: 0,
        eval_reward_mean: ev.mean_reward(),
        eval_reward_std: ev.std_reward(),
        eval_imputed_mse: ev.mean_imputed_mse(),
        train_reward_mean: None,
        train_imputed_mse: None,
        policy_loss: None,
        value_loss: None,
        model_loss: None,
        approx_kl: None,
        clip_fraction: None,
        lr: None,
    };
    let mut best_agent = agent.clone();
    let mut best_iteration = 0;
    let mut best_reward = rec.eval_reward_mean;
    observer(&rec, &agent, true).map_err(RlError::Observer)?;
    records.push(rec);

    let mut timesteps = 0;
    for it in 1..=iterations {
        let episodes = collect(&agent, spec, &corruption, it)?;
        timesteps += episodes.iter().map(Episode::len).sum::<usize>();

        let rewards: Vec<Vec<f64>> = if hyper.reward_norm {
            for ep in &episodes {
                let mut ret = 0.0;
                for r in &ep.rewards {
                    ret = hyper.gamma * ret + r;
                    reward_stats.push(ret);
                }
            }
            let scale = 1.0 / reward_stats.std();
            episodes
                .iter()
                .map(|ep| {
                    ep.rewards
                        .iter()
                        .map(|r| (r * scale).clamp(-10.0, 10.0))
                        .collect()
                })
                .collect()
        } else {
            episodes.iter().map(|ep| ep.rewards.clone()).collect()
        };

        let lr = if hyper.lr_anneal {
            hyper.lr * (1.0 - (it - 1) as f64 / iterations as f64)
        } else {
            hyper.lr
        };
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "shuffle", it as u64));
        let mut epoch_stats = StepStats::default();
        let mut train_mse = 0.0;
        for epoch in 0..hyper.epochs {
            let mut batch = prepare_batch(
                &agent,
                &episodes,
                &rewards,
                &noise_cov,
                hyper.gamma,
                hyper.gae_lambda,
            )?;
            if epoch == 0 {
                train_mse = batch.imputed_mse;
            }
            normalize_advantages(&mut batch.advantages);
            let mut order: Vec<usize> = (0..batch.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut sums = StepStats::default();
            let mut count = 0.0;
            for chunk in order.chunks(hyper.minibatch) {
                let s = joint_step(
                    &mut agent, &mut adam, &batch, chunk, hyper, &noise_cov, lr, it,
                )?;
                let w = chunk.len() as f64;
                sums.objective += s.objective * w;
                sums.policy_loss += s.policy_loss * w;
                sums.value_loss += s.value_loss * w;
                sums.model_loss += s.model_loss * w;
                sums.approx_kl += s.approx_kl * w;
                sums.clip_fraction += s.clip_fraction * w;
                count += w;
            }
            epoch_stats = StepStats {
                objective: sums.objective / count,
                policy_loss: sums.policy_loss / count,
                value_loss: sums.value_loss / count,
                model_loss: sums.model_loss / count,
                approx_kl: sums.approx_kl / count,
                clip_fraction: sums.clip_fraction / count,
            };
        }

        let finished: Vec<f64> = episodes
            .iter()
            .filter(|e| e.end != SegmentEnd::Cutoff)
            .map(Episode::total_reward)
            .collect();
        let ev = evaluate(&agent, spec.env, &corruption, spec.seed, "eval", eval_n)?;
        let rec = IterationRecord {
            iteration: it,
            timesteps,
            eval_reward_mean: ev.mean_reward(),
            eval_reward_std: ev.std_reward(),
            eval_imputed_mse: ev.mean_imputed_mse(),
            train_reward_mean: (!finished.is_empty()).then(|| mean(&finished)),
            train_imputed_mse: Some(train_mse),
            policy_loss: Some(epoch_stats.policy_loss),
            value_loss: Some(epoch_stats.value_loss),
            model_loss: agent.kind.uses_model().then_some(epoch_stats.model_loss),
            approx_kl: Some(epoch_stats.approx_kl),
            clip_fraction: Some(epoch_stats.clip_fraction),
            lr: Some(lr),
        };
        let is_best = rec.eval_reward_mean > best_reward;
        if is_best {
            best_reward = rec.eval_reward_mean;
            best_agent = agent.clone();
            best_iteration = it;
        }
        observer(&rec, &agent, is_best).map_err(RlError::Observer)?;
        records.push(rec);
    }
    Ok(TrainOutcome {
        agent,
        best_agent,
        best_iteration,
        records,
    })
}

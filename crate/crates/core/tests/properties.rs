use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use birl_core::belief::{
    belief_features, build_sub_permutation, posterior_update, BeliefState, MaskedObservation,
};
use birl_core::corruption::{CorruptionConfig, Mechanism, ObservationChannel};
use birl_core::dynamics::{
    episode_terms, model_loss, model_loss_and_grad, Dynamics, InputScaling, ModelGrads, ModelTerm,
    TransitionModel,
};
use birl_core::env::EnvName;
use birl_core::harness::{config_hash, ExperimentConfig};
use birl_core::linalg::{cholesky, gaussian_logpdf, solve_psd, Gaussian, Mat};
use birl_core::nn::{grad_check, Activation, AdamConfig, AdamState, Mlp};
use birl_core::oracle::monte_carlo_advantage;
use birl_core::rl::{
    gae, normalize_advantages, ppo_policy_loss, ppo_policy_loss_from_log_probs, ppo_term, Agent,
    AgentKind, Tracker,
};

fn spd(d: usize, seed: u64, scale: f64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut m = a.matmul(&a.transpose()).unwrap();
    m.add_diagonal(0.05);
    m.scale(scale).symmetrize()
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn min_eigenvalue(m: &Mat) -> f64 {
    let n = DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)]);
    SymmetricEigen::new(n).eigenvalues.min()
}

fn mask_strategy(d: usize) -> impl Strategy<Value = Vec<bool>> {
    proptest::collection::vec(any::<bool>(), d)
}

// ---------------------------------------------------------------- linalg

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cholesky_reconstructs(d in 1usize..6, seed in any::<u64>(), log_scale in -4.0f64..3.0) {
        let m = spd(d, seed, 10f64.powf(log_scale));
        let l = cholesky(&m).unwrap();
        let back = l.matmul(&l.transpose()).unwrap();
        prop_assert!(back.max_abs_diff(&m) <= 1e-10 * m.max_abs().max(1.0));
    }

    #[test]
    fn solve_psd_inverts(d in 1usize..6, seed in any::<u64>()) {
        let m = spd(d, seed, 1.0);
        let y = Mat::column(&normals(d, seed ^ 1));
        let x = solve_psd(&m, &m.matmul(&y).unwrap()).unwrap();
        prop_assert!(x.max_abs_diff(&y) < 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logpdf_integrates_to_one(d in 1usize..=2, seed in any::<u64>()) {
        let cov = spd(d, seed, 1.0);
        let mean = normals(d, seed ^ 7);
        let n = if d == 1 { 4000 } else { 400 };
        let sd: Vec<f64> = (0..d).map(|i| cov[(i, i)].sqrt()).collect();
        let hw = 9.0;
        let step: Vec<f64> = sd.iter().map(|s| 2.0 * hw * s / n as f64).collect();
        let node = |i: usize, k: usize| mean[i] - hw * sd[i] + (k as f64 + 0.5) * step[i];
        let mut total = 0.0;
        if d == 1 {
            for k in 0..n {
                total += gaussian_logpdf(&[node(0, k)], &mean, &cov).unwrap().exp() * step[0];
            }
        } else {
            for a in 0..n {
                for b in 0..n {
                    total += gaussian_logpdf(&[node(0, a), node(1, b)], &mean, &cov).unwrap().exp()
                        * step[0] * step[1];
                }
            }
        }
        prop_assert!((total - 1.0).abs() < 1e-3, "{total}");
    }
}

// ---------------------------------------------------------------- belief filter

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sub_permutation_rows_are_orthonormal(mask in mask_strategy(7)) {
        let w = build_sub_permutation(&mask).matrix();
        let k = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(w.rows(), k);
        prop_assert_eq!(w.matmul(&w.transpose()).unwrap(), Mat::identity(k));
    }

    #[test]
    fn posterior_shrinks_covariance(
        d in 1usize..5,
        seed in any::<u64>(),
        mask in mask_strategy(4),
        log_noise in -8.0f64..1.0,
    ) {
        let prior = Gaussian::new(normals(d, seed), spd(d, seed ^ 3, 1.0)).unwrap();
        let noise = Mat::identity(d).scale(10f64.powf(log_noise));
        let obs = MaskedObservation::new(&normals(d, seed ^ 5), &mask[..d]);
        let post = posterior_update(&BeliefState::intermediate(prior.clone()), &obs, &noise).unwrap();
        prop_assert!(min_eigenvalue(&prior.cov.sub(post.cov()).unwrap()) >= -1e-8);
    }

    #[test]
    fn masked_values_are_ignored(
        d in 1usize..5,
        seed in any::<u64>(),
        mask in mask_strategy(4),
        junk in proptest::collection::vec(-1e3f64..1e3, 4),
    ) {
        let prior = BeliefState::intermediate(Gaussian::new(normals(d, seed), spd(d, seed ^ 3, 1.0)).unwrap());
        let noise = spd(d, seed ^ 9, 0.1);
        let values = normals(d, seed ^ 5);
        let mut other = values.clone();
        for i in 0..d {
            if !mask[i] {
                other[i] = junk[i];
            }
        }
        let a = posterior_update(&prior, &MaskedObservation::new(&values, &mask[..d]), &noise).unwrap();
        let b = posterior_update(&prior, &MaskedObservation::new(&other, &mask[..d]), &noise).unwrap();
        for i in 0..d {
            prop_assert!((a.mean()[i] - b.mean()[i]).abs() <= 1e-12);
        }
        prop_assert!(a.cov().max_abs_diff(b.cov()) <= 1e-12);
    }

    #[test]
    fn more_noise_means_less_gain(p in 0.01f64..10.0, r1 in 0.0f64..5.0, extra in 1e-3f64..5.0, y in -3.0f64..3.0) {
        let prior = BeliefState::intermediate(Gaussian::new(vec![0.0], Mat::from_rows(&[[p]])).unwrap());
        let obs = MaskedObservation::full(&[y]);
        let lo = posterior_update(&prior, &obs, &Mat::from_rows(&[[r1]])).unwrap();
        let hi = posterior_update(&prior, &obs, &Mat::from_rows(&[[r1 + extra]])).unwrap();
        // gain is the fraction of the residual absorbed by the mean
        let (g_lo, g_hi) = (lo.mean()[0] / y, hi.mean()[0] / y);
        if y.abs() > 1e-6 {
            prop_assert!(g_hi < g_lo);
        }
        prop_assert!(hi.cov()[(0, 0)] > lo.cov()[(0, 0)]);
    }

    #[test]
    fn update_ignores_how_the_mask_arose(seed in any::<u64>(), eta in 0.05f64..0.6) {
        let env = EnvName::Pendulum.build();
        let bounds = env.action_bounds();
        let mar = CorruptionConfig::new(Mechanism::Mar, eta, 5.0, 3, 1, &bounds, seed).unwrap();
        let mut channel = ObservationChannel::new(mar, seed);
        let state = normals(3, seed);
        let from_mar = channel.observe(&state, &[0.5]);
        // the same mask and values as if drawn under MCAR
        let from_mcar = MaskedObservation::new(&from_mar.zero_filled(), from_mar.mask());
        let prior = BeliefState::intermediate(Gaussian::new(vec![0.0; 3], spd(3, seed, 1.0)).unwrap());
        let noise = Mat::identity(3).scale(0.0025);
        prop_assert_eq!(
            posterior_update(&prior, &from_mar, &noise).unwrap(),
            posterior_update(&prior, &from_mcar, &noise).unwrap()
        );
    }

    #[test]
    fn single_observed_coordinate_matches_scalar_conditioning(
        d in 1usize..5,
        seed in any::<u64>(),
        which in 0usize..4,
        noise_var in 1e-3f64..2.0,
    ) {
        let o = which % d;
        let diag: Vec<f64> = normals(d, seed).iter().map(|v| 0.1 + v.abs()).collect();
        let mean = normals(d, seed ^ 1);
        let prior = BeliefState::intermediate(Gaussian::new(mean.clone(), Mat::from_diag(&diag)).unwrap());
        let y = mean[o] + 1.3;
        let mut values = vec![0.0; d];
        values[o] = y;
        let mask: Vec<bool> = (0..d).map(|i| i == o).collect();
        let post = posterior_update(&prior, &MaskedObservation::new(&values, &mask), &Mat::identity(d).scale(noise_var)).unwrap();
        let k = diag[o] / (diag[o] + noise_var);
        prop_assert!((post.mean()[o] - (mean[o] + k * 1.3)).abs() <= 1e-12 * (1.0 + mean[o].abs()));
        prop_assert!((post.cov()[(o, o)] - (1.0 - k) * diag[o]).abs() <= 1e-12 * diag[o].max(1.0));
        for i in (0..d).filter(|&i| i != o) {
            prop_assert_eq!(post.mean()[i], mean[i]);
            prop_assert_eq!(post.cov()[(i, i)], diag[i]);
        }
    }
}

// ---------------------------------------------------------------- networks and optimiser

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mlp_gradient_matches_differences(
        widths in proptest::collection::vec(1usize..6, 2..5),
        seed in any::<u64>(),
        tanh_out in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_act = if tanh_out { Activation::Tanh } else { Activation::Identity };
        let mut net = Mlp::orthogonal(&widths, Activation::Tanh, out_act, 1.0, 1.0, &mut rng);
        let p: Vec<f64> = net.params().iter().map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        net.set_params(&p).unwrap();
        let x = normals(widths[0], seed ^ 2);
        let target = normals(*widths.last().unwrap(), seed ^ 3);
        let loss = |net: &Mlp| -> f64 {
            net.infer(&x).unwrap().iter().zip(&target).map(|(y, t)| 0.5 * (y - t) * (y - t)).sum()
        };
        let tape = net.forward_tape(&x).unwrap();
        let out_grad: Vec<f64> = tape.output().iter().zip(&target).map(|(y, t)| y - t).collect();
        let mut g = vec![0.0; net.param_count()];
        net.backward_tape(&tape, &out_grad, &mut g).unwrap();
        let mut probe = net.clone();
        let rep = grad_check(|q| { probe.set_params(q).unwrap(); loss(&probe) }, &p, &g, 1e-6);
        prop_assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn adam_is_deterministic(seed in any::<u64>(), steps in 1usize..30) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let mut opt = AdamState::new(5, AdamConfig::default());
            for _ in 0..steps {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v + rng.sample::<f64, _>(StandardNormal)).collect();
                opt.step(&mut p, &g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

// ---------------------------------------------------------------- transition model

fn random_model(d: usize, seed: u64, spread: f64) -> TransitionModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = TransitionModel::new(d, 1, 6, InputScaling::unit(d, 1), &mut rng);
    let p: Vec<f64> = m.flat_params().iter().map(|v| v + spread * rng.sample::<f64, _>(StandardNormal)).collect();
    m.set_flat_params(&p).unwrap();
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_covariance_is_positive_definite(d in 1usize..4, seed in any::<u64>(), spread in 0.0f64..20.0) {
        let m = random_model(d, seed, spread);
        let s = normals(d, seed ^ 4).iter().map(|v| 5.0 * v).collect::<Vec<_>>();
        let g = m.transition(&s, &[0.3]);
        prop_assert!(cholesky(&g.cov).is_ok());
        // eigen-solver roundoff scales with the largest entry
        prop_assert!(min_eigenvalue(&g.cov) >= -1e-12 * g.cov.max_abs());
        prop_assert!(cholesky(&m.initial_belief().cov).is_ok());
    }

    #[test]
    fn masked_next_values_do_not_change_loss(
        d in 1usize..4,
        seed in any::<u64>(),
        mask in mask_strategy(3),
        junk in proptest::collection::vec(-50.0f64..50.0, 3),
    ) {
        let m = random_model(d, seed, 0.3);
        let noise = Mat::identity(d).scale(0.01);
        let values = normals(d, seed ^ 6);
        let mut other = values.clone();
        for i in 0..d {
            if !mask[i] {
                other[i] = junk[i];
            }
        }
        let terms = |v: &[f64]| vec![
            ModelTerm::Initial { obs: MaskedObservation::new(v, &mask[..d]) },
            ModelTerm::Transition {
                belief_mean: normals(d, seed ^ 8),
                action: vec![0.1],
                next_obs: MaskedObservation::new(v, &mask[..d]),
            },
        ];
        let a = model_loss(&m, &terms(&values), &noise).unwrap();
        let b = model_loss(&m, &terms(&other), &noise).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn belief_means_are_constants_for_the_gradient(d in 1usize..3, seed in any::<u64>()) {
        // beliefs come from a frozen copy; the gradient only sees the
        // likelihood terms evaluated at the trainable parameters
        let frozen = random_model(d, seed, 0.2);
        let trainable = random_model(d, seed ^ 1, 0.2);
        let noise = Mat::identity(d).scale(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs: Vec<MaskedObservation> = (0..4)
            .map(|_| MaskedObservation::new(&normals(d, rng.random()), &vec![true; d]))
            .collect();
        let actions: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let terms = episode_terms(&frozen, &obs, &actions, &noise).unwrap();
        let mut g = ModelGrads::zeros_like(&trainable);
        model_loss_and_grad(&trainable, &terms, &noise, Some((&mut g, 1.0))).unwrap();

        // a different frozen copy changes the terms but not how the gradient is formed
        let other_frozen = random_model(d, seed ^ 2, 0.2);
        let other_terms = episode_terms(&other_frozen, &obs, &actions, &noise).unwrap();
        let mut probe = trainable.clone();
        for (t, grads) in [(&terms, g.flatten()), (&other_terms, {
            let mut h = ModelGrads::zeros_like(&trainable);
            model_loss_and_grad(&trainable, &other_terms, &noise, Some((&mut h, 1.0))).unwrap();
            h.flatten()
        })] {
            let rep = grad_check(
                |q| { probe.set_flat_params(q).unwrap(); model_loss(&probe, t, &noise).unwrap() },
                &trainable.flat_params(),
                &grads,
                1e-6,
            );
            prop_assert!(rep.max_rel_error < 1e-4, "{rep:?}");
        }
    }
}

#[test]
fn model_loss_falls_under_adam() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = TransitionModel::new(2, 1, 8, InputScaling::unit(2, 1), &mut rng);
    let noise = Mat::identity(2).scale(0.01);
    // synthetic linear data
    let terms: Vec<ModelTerm> = (0..64)
        .map(|_| {
            let s: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let a = rng.random_range(-1.0..1.0);
            let next = [0.9 * s[0] + 0.1 * s[1], -0.1 * s[0] + 0.9 * s[1] + 0.5 * a];
            ModelTerm::Transition {
                belief_mean: s,
                action: vec![a],
                next_obs: MaskedObservation::full(&next),
            }
        })
        .collect();
    let mut opt = AdamState::new(m.param_count(), AdamConfig { lr: 3e-3, ..AdamConfig::default() });
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = ModelGrads::zeros_like(&m);
        losses.push(model_loss_and_grad(&m, &terms, &noise, Some((&mut g, 1.0))).unwrap());
        let mut p = m.flat_params();
        opt.step(&mut p, &g.flatten()).unwrap();
        m.set_flat_params(&p).unwrap();
    }
    let rises = losses.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
    assert!(losses[49] < losses[0] - 0.1, "{losses:?}");
    assert!(rises <= 2, "{losses:?}");
}

// ---------------------------------------------------------------- corruption

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masks_never_read_the_latent_state(seed in any::<u64>(), eta in 0.05f64..0.6, mcar in any::<bool>()) {
        let mech = if mcar { Mechanism::Mcar } else { Mechanism::Mar };
        let cfg = CorruptionConfig::new(mech, eta, 1.0, 3, 1, &(vec![-2.0], vec![2.0]), seed).unwrap();
        let prev = normals(3, seed ^ 1);
        let action = [0.7];
        let mut r1 = ChaCha8Rng::seed_from_u64(seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed);
        for k in 0..20 {
            let s1 = normals(3, seed ^ (k + 10));
            let s2: Vec<f64> = s1.iter().map(|v| v * -40.0 + 3.0).collect();
            let a = cfg.corrupt(&s1, &prev, &action, &mut r1);
            let b = cfg.corrupt(&s2, &prev, &action, &mut r2);
            prop_assert_eq!(a.mask(), b.mask());
        }
    }

    #[test]
    fn corruption_is_reproducible(seed in any::<u64>(), eta in 0.0f64..0.6) {
        let env = EnvName::Cartpole.build();
        let mech = if eta == 0.0 { Mechanism::None } else { Mechanism::Mar };
        let cfg = CorruptionConfig::new(mech, eta, 3.0, 4, 1, &env.action_bounds(), seed).unwrap();
        let states: Vec<Vec<f64>> = (0..30).map(|k| normals(4, seed ^ k)).collect();
        let run = || {
            let mut ch = ObservationChannel::new(cfg.clone(), seed);
            states.iter().map(|s| ch.observe(s, &[0.2])).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.mask(), y.mask());
            prop_assert!(x.zero_filled().iter().zip(y.zero_filled()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn clean_channel_is_transparent(seed in any::<u64>(), d in 1usize..6) {
        let mut ch = ObservationChannel::new(CorruptionConfig::clean(d, 1), seed);
        for k in 0..10 {
            let s = normals(d, seed ^ k);
            let o = ch.observe(&s, &[0.0]);
            prop_assert_eq!(o.missing_count(), 0);
            prop_assert_eq!(o.zero_filled(), s);
        }
    }
}

#[test]
fn realised_missing_ratio_respects_eta() {
    for env_name in [EnvName::Linear, EnvName::Pendulum, EnvName::Cartpole] {
        let mut env = env_name.build();
        let bounds = env.action_bounds();
        for eta in [0.1, 0.3] {
            let cfg = CorruptionConfig::new(Mechanism::Mar, eta, 1.0, env.state_dim(), env.action_dim(), &bounds, 9).unwrap();
            let mut ch = ObservationChannel::new(cfg, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut missing = vec![0usize; env.state_dim()];
            let mut n = 0usize;
            for ep in 0..40 {
                ch.reset(ep);
                let mut s = env.reset(ep);
                let mut a = vec![0.0; env.action_dim()];
                loop {
                    let o = ch.observe(&s, &a);
                    for (i, &m) in o.mask().iter().enumerate() {
                        missing[i] += usize::from(!m);
                    }
                    n += 1;
                    a = bounds.0.iter().zip(&bounds.1).map(|(l, h)| rng.random_range(*l..*h)).collect();
                    let step = env.step(&a);
                    if step.done() {
                        break;
                    }
                    s = step.state;
                }
            }
            for m in missing {
                let p = m as f64 / n as f64;
                let mc = 3.0 * (eta * (1.0 - eta) / n as f64).sqrt();
                assert!(p <= eta + mc, "{env_name} η {eta}: realised {p} over {n}");
            }
        }
    }
}

// ---------------------------------------------------------------- PPO, GAE

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gae_with_unit_lambda_is_monte_carlo(
        rewards in proptest::collection::vec(-5.0f64..5.0, 1..40),
        seed in any::<u64>(),
        gamma in 0.5f64..1.0,
    ) {
        let n = rewards.len();
        let mut values = normals(n + 1, seed);
        values[n] = 0.0;
        let mut dones = vec![false; n];
        dones[n - 1] = true;
        let (adv, _) = gae(&rewards, &values, &dones, gamma, 1.0).unwrap();
        let mc = monte_carlo_advantage(&rewards, &values, gamma);
        for (a, b) in adv.iter().zip(mc) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ppo_loss_depends_only_on_log_ratio(
        logp in proptest::collection::vec(-5.0f64..1.0, 1..30),
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let n = logp.len();
        let old: Vec<f64> = normals(n, seed).iter().zip(&logp).map(|(e, l)| l + 0.3 * e).collect();
        let adv = normals(n, seed ^ 1);
        let base = ppo_policy_loss_from_log_probs(&logp, &old, &adv, 0.2).unwrap();
        let lp2: Vec<f64> = logp.iter().map(|v| v + shift).collect();
        let old2: Vec<f64> = old.iter().map(|v| v + shift).collect();
        let moved = ppo_policy_loss_from_log_probs(&lp2, &old2, &adv, 0.2).unwrap();
        prop_assert!((base - moved).abs() <= 1e-9 * base.abs().max(1.0));
        let ratios: Vec<f64> = logp.iter().zip(&old).map(|(l, o)| (l - o).exp()).collect();
        prop_assert!((base - ppo_policy_loss(&ratios, &adv, 0.2).unwrap()).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn normalised_advantages_are_standard(adv in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let mut a = adv.clone();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-10);
        prop_assert!((std - 1.0).abs() < 1e-6);
    }

    #[test]
    fn surrogate_gain_is_bounded(ratio in 0.0f64..10.0, adv in -100.0f64..100.0, clip in 0.01f64..0.9) {
        // the per-sample gain −term never exceeds (1+δ)|Â|
        prop_assert!(-ppo_term(ratio, adv, clip) <= (1.0 + clip) * adv.abs() + 1e-12);
    }
}

#[test]
fn bi_features_collapse_on_clean_observations() {
    let mut env = EnvName::Pendulum.build();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let agent = Agent::new(AgentKind::Bi, env.as_ref(), 16, 0.0, &mut rng);
    let cfg = CorruptionConfig::clean(env.state_dim(), env.action_dim());
    let mut channel = ObservationChannel::new(cfg.clone(), 0);
    let mut tracker = Tracker::new(AgentKind::Bi, &agent.model, &cfg.noise_cov());
    let mut s = env.reset(3);
    let mut a = vec![0.0];
    for _ in 0..50 {
        let obs = channel.observe(&s, &a);
        let est = tracker.observe(&obs, &s).unwrap();
        assert_eq!(est.point, s);
        let spread = est.spread.expect("belief spread");
        assert!(spread.iter().all(|&v| v.abs() < 1e-12), "{spread:?}");
        if let Tracker::Belief(f) = &tracker {
            let feats = belief_features(f.posterior().unwrap());
            assert_eq!(&feats[..3], s.as_slice());
        }
        a = vec![rng.random_range(-2.0..2.0)];
        tracker.advance(&a, &agent.model).unwrap();
        s = env.step(&a).state;
    }
}

// ---------------------------------------------------------------- harness

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_hash_tracks_content(seed in 0u64..1000, eta in 0.0f64..0.9, lr in 1e-5f64..1e-2, field in 0usize..6) {
        let mut cfg = ExperimentConfig {
            etas: vec![eta],
            seeds: vec![seed],
            ..ExperimentConfig::default()
        };
        cfg.hyper.lr = lr;
        // reparsing a re-serialised config is semantically identical
        let reparsed = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        prop_assert_eq!(config_hash(&reparsed), config_hash(&cfg));

        let mut changed = cfg.clone();
        match field {
            0 => changed.seeds.push(seed + 1),
            1 => changed.etas[0] = eta + 0.05,
            2 => changed.hyper.lr = lr * 1.5,
            3 => changed.timesteps += 1,
            4 => changed.agents.push(AgentKind::Fa),
            _ => changed.env = EnvName::Cartpole,
        }
        prop_assert_ne!(config_hash(&changed), config_hash(&cfg));
    }
}

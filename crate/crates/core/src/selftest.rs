//! Reduced oracle suites runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::belief::{posterior_update, BeliefState, MaskedObservation, SubPermutation};
use crate::corruption::{calibration_inputs, CorruptionConfig, Mechanism};
use crate::dynamics::{model_loss, model_loss_and_grad, InputScaling, ModelGrads, ModelTerm, TransitionModel};
use crate::env::{Environment, LinearGaussianEnv};
use crate::linalg::{Gaussian, Mat};
use crate::nn::grad_check;
use crate::oracle;
use crate::rl::gae;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        name,
        passed,
        detail,
    }
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut m = a.matmul(&a.transpose()).unwrap();
    m.add_diagonal(0.1);
    m.symmetrize()
}

fn masked_kalman(eta: f64) -> f64 {
    let mut env = LinearGaussianEnv::default();
    let dynamics = env.dynamics().clone();
    let d = env.state_dim();
    let noise = Mat::identity(d).scale(0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = env.reset(1);
    let mut ours = dynamics.init.clone();
    let mut reference = dynamics.init.clone();
    let mut worst = 0.0_f64;
    for t in 0..100 {
        if t > 0 {
            let a = [rng.random_range(-1.0..1.0)];
            s = env.step(&a).state;
            ours = oracle::kalman_predict(&dynamics.a, &dynamics.b, &dynamics.q, &ours, &a);
            reference =
                oracle::kalman_predict(&dynamics.a, &dynamics.b, &dynamics.q, &reference, &a);
        }
        let mask: Vec<bool> = (0..d).map(|_| rng.random::<f64>() >= eta).collect();
        let values: Vec<f64> = s.iter().map(|x| x + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let obs = MaskedObservation::new(&values, &mask);
        ours = posterior_update(&BeliefState::intermediate(ours), &obs, &noise)
            .unwrap()
            .gaussian;
        let w = SubPermutation::from_mask(&mask);
        let h = w.matrix();
        let r = w.select_square(&noise);
        reference = oracle::kalman_update(&reference, &h, &w.select(&values), &r).unwrap();
        let dm = ours
            .mean
            .iter()
            .zip(&reference.mean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(dm).max(ours.cov.max_abs_diff(&reference.cov));
    }
    worst
}

fn conjugate() -> f64 {
    let mean = [0.4, -1.0];
    let cov = [[1.5, -0.7], [-0.7, 1.0]];
    let (m, c) = oracle::conjugate_condition_2d(mean, cov, 0.2, 1, 0.3);
    let prior = Gaussian::new(mean.to_vec(), Mat::from_rows(&cov)).unwrap();
    let post = posterior_update(
        &BeliefState::intermediate(prior),
        &MaskedObservation::new(&[0.0, 0.3], &[false, true]),
        &Mat::identity(2).scale(0.2),
    )
    .unwrap();
    let mut worst = 0.0_f64;
    for i in 0..2 {
        worst = worst.max((post.mean()[i] - m[i]).abs());
        for j in 0..2 {
            worst = worst.max((post.cov()[(i, j)] - c[i][j]).abs());
        }
    }
    worst
}

fn collapse() -> (f64, f64) {
    let prior = Gaussian::new(vec![0.3, -0.2, 1.0], random_spd(3, &mut ChaCha8Rng::seed_from_u64(2))).unwrap();
    let x = [1.0, 2.0, -3.0];
    let post = posterior_update(
        &BeliefState::intermediate(prior),
        &MaskedObservation::full(&x),
        &Mat::zeros(3, 3),
    )
    .unwrap();
    let dm = post
        .mean()
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    (dm, post.cov().frobenius_norm())
}

fn model_gradient() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = TransitionModel::new(2, 1, 6, InputScaling::unit(2, 1), &mut rng);
    let mut p = model.flat_params();
    p.iter_mut().for_each(|x| *x += 0.3 * rng.sample::<f64, _>(StandardNormal));
    model.set_flat_params(&p).unwrap();
    let noise = Mat::identity(2).scale(0.05);
    let terms = vec![
        ModelTerm::Initial {
            obs: MaskedObservation::new(&[0.5, 0.0], &[true, false]),
        },
        ModelTerm::Transition {
            belief_mean: vec![0.2, -0.4],
            action: vec![0.7],
            next_obs: MaskedObservation::full(&[0.1, 0.3]),
        },
    ];
    let mut g = ModelGrads::zeros_like(&model);
    model_loss_and_grad(&model, &terms, &noise, Some((&mut g, 1.0))).unwrap();
    let mut probe = model.clone();
    grad_check(
        |q| {
            probe.set_flat_params(q).unwrap();
            model_loss(&probe, &terms, &noise).unwrap()
        },
        &p,
        &g.flatten(),
        1e-6,
    )
    .max_rel_error
}

fn gae_bruteforce() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..11).map(|_| rng.sample(StandardNormal)).collect();
    let mut dones = vec![false; 10];
    dones[4] = true;
    let (a, _) = gae(&r, &v, &dones, 0.97, 0.9).unwrap();
    let b = oracle::gae_brute_force(&r, &v, &dones, 0.97, 0.9);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn calibration() -> f64 {
    let bounds = (vec![-1.0], vec![1.0]);
    let mut worst = 0.0_f64;
    for mech in [Mechanism::Mcar, Mechanism::Mar] {
        for eta in [0.1, 0.2, 0.3] {
            let cfg = CorruptionConfig::new(mech, eta, 0.0, 3, 1, &bounds, 21).unwrap();
            let fresh = calibration_inputs(&cfg, &bounds, 1234);
            worst = worst.max((cfg.max_missing_prob(&fresh) - eta).abs());
        }
    }
    worst
}

fn psd_endurance(n: usize) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    let mut min_eig = f64::INFINITY;
    for _ in 0..n {
        let d = rng.random_range(1..=4);
        let prior = Gaussian {
            mean: vec![0.0; d],
            cov: random_spd(d, &mut rng).scale(10f64.powf(rng.random_range(-3.0..2.0))),
        };
        let mask: Vec<bool> = (0..d).map(|_| rng.random()).collect();
        let scale = 10f64.powf(rng.random_range(-8.0..1.0));
        let noise = Mat::identity(d).scale(scale);
        let obs = MaskedObservation::new(&vec![0.5; d], &mask);
        match posterior_update(&BeliefState::intermediate(prior.clone()), &obs, &noise) {
            Ok(post) => {
                let diff = prior.cov.sub(post.cov()).unwrap();
                let low = oracle::symmetric_eigenvalues(&diff)
                    .into_iter()
                    .fold(f64::INFINITY, f64::min);
                min_eig = min_eig.min(low);
            }
            Err(_) => failures += 1,
        }
    }
    (failures, min_eig)
}

/// Runs every suite; each check reports its measured error against the bound.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    for eta in [0.0, 0.3] {
        let e = masked_kalman(eta);
        out.push(check(
            if eta == 0.0 {
                "masked kalman (eta 0)"
            } else {
                "masked kalman (eta 0.3)"
            },
            e < 1e-8,
            format!("max deviation {e:.3e} (bound 1e-8)"),
        ));
    }
    let e = conjugate();
    out.push(check(
        "conjugate conditioning",
        e < 1e-10,
        format!("max deviation {e:.3e} (bound 1e-10)"),
    ));
    let (dm, dc) = collapse();
    out.push(check(
        "collapse",
        dm == 0.0 && dc < 1e-12,
        format!("mean error {dm:.3e}, covariance norm {dc:.3e}"),
    ));
    let e = model_gradient();
    out.push(check(
        "model loss gradient",
        e < 1e-4,
        format!("max relative error {e:.3e} (bound 1e-4)"),
    ));
    let e = gae_bruteforce();
    out.push(check(
        "gae vs brute force",
        e < 1e-12,
        format!("max deviation {e:.3e}"),
    ));
    let e = calibration();
    out.push(check(
        "missing-ratio calibration",
        e < 0.02,
        format!("max |estimate - eta| {e:.4} (bound 0.02)"),
    ));
    let (fails, eig) = psd_endurance(10_000);
    out.push(check(
        "psd endurance (1e4 updates)",
        fails == 0 && eig >= -1e-8,
        format!("{fails} failures, worst eigenvalue bound {eig:.3e}"),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}

//! Continuous-control environments with directly readable latent state.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{InputScaling, LinearGaussianDynamics};
use crate::linalg::{Gaussian, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub reward: f64,
    /// Reached a terminal state.
    pub terminal: bool,
    /// Hit the step limit without terminating.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminal || self.truncated
    }
}

pub trait Environment: Send {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Per-coordinate `(low, high)` action bounds.
    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn max_steps(&self) -> usize;
    /// Starts an episode; the same seed always gives the same episode.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    /// Actions outside the bounds are clipped.
    fn step(&mut self, action: &[f64]) -> Step;
    /// Rough per-coordinate magnitude of the state, used to scale network inputs.
    fn input_scaling(&self) -> InputScaling;
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    Linear,
    Pendulum,
    Cartpole,
}

impl EnvName {
    pub fn build(self) -> Box<dyn Environment> {
        match self {
            EnvName::Linear => Box::new(LinearGaussianEnv::default()),
            EnvName::Pendulum => Box::new(Pendulum::new()),
            EnvName::Cartpole => Box::new(CartPole::new()),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Linear => "linear",
            EnvName::Pendulum => "pendulum",
            EnvName::Cartpole => "cartpole",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(EnvName::Linear),
            "pendulum" => Ok(EnvName::Pendulum),
            "cartpole" => Ok(EnvName::Cartpole),
            other => Err(format!(
                "unknown environment `{other}` (expected linear, pendulum or cartpole)"
            )),
        }
    }
}

/// Stable linear system `s' = A s + B a + w` with quadratic cost.
#[derive(Debug, Clone)]
pub struct LinearGaussianEnv {
    dynamics: LinearGaussianDynamics,
    process_std: f64,
    action_bound: f64,
    max_steps: usize,
    state: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
}

impl Default for LinearGaussianEnv {
    /// Damped rotation in the plane driven through the second coordinate.
    fn default() -> Self {
        let a = Mat::from_rows(&[[0.95, 0.2], [-0.2, 0.95]]);
        let b = Mat::from_rows(&[[0.0], [0.1]]);
        Self::new(a, b, 0.05, 1.0, 100)
    }
}

impl LinearGaussianEnv {
    pub fn new(a: Mat, b: Mat, process_std: f64, action_bound: f64, max_steps: usize) -> Self {
        let d = a.rows();
        let q = Mat::identity(d).scale(process_std * process_std);
        let dynamics =
            LinearGaussianDynamics::new(a, b, q, Gaussian::standard(d)).expect("consistent shapes");
        LinearGaussianEnv {
            dynamics,
            process_std,
            action_bound,
            max_steps,
            state: vec![0.0; d],
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// The true model, with the initial-state distribution as initial belief.
    pub fn dynamics(&self) -> &LinearGaussianDynamics {
        &self.dynamics
    }

    pub fn set_state(&mut self, s: &[f64]) {
        self.state = s.to_vec();
    }

    pub fn reward(state: &[f64], action: &[f64]) -> f64 {
        -state.iter().map(|x| x * x).sum::<f64>() - 0.01 * action.iter().map(|x| x * x).sum::<f64>()
    }
}

impl Environment for LinearGaussianEnv {
    fn state_dim(&self) -> usize {
        self.dynamics.a.rows()
    }

    fn action_dim(&self) -> usize {
        self.dynamics.b.cols()
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let a = self.action_dim();
        (vec![-self.action_bound; a], vec![self.action_bound; a])
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.state = (0..self.state_dim())
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let a: Vec<f64> = action
            .iter()
            .map(|x| clip(*x, -self.action_bound, self.action_bound))
            .collect();
        let reward = Self::reward(&self.state, &a);
        let mut next = self.dynamics.mean(&self.state, &a);
        for x in next.iter_mut() {
            *x += self.process_std * self.rng.sample::<f64, _>(StandardNormal);
        }
        self.state = next;
        self.t += 1;
        Step {
            state: self.state.clone(),
            reward,
            terminal: false,
            truncated: self.t >= self.max_steps,
        }
    }

    fn input_scaling(&self) -> InputScaling {
        InputScaling {
            state: vec![1.0; self.state_dim()],
            action: vec![1.0 / self.action_bound; self.action_dim()],
        }
    }
}

fn angle_normalize(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Torque-limited swing-up pendulum; state `(cos θ, sin θ, θ̇)` with θ = 0
/// upright.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub max_speed: f64,
    pub max_torque: f64,
    pub dt: f64,
    pub g: f64,
    pub m: f64,
    pub l: f64,
    pub max_steps: usize,
    theta: f64,
    theta_dot: f64,
    t: usize,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Pendulum {
            max_speed: 8.0,
            max_torque: 2.0,
            dt: 0.05,
            g: 10.0,
            m: 1.0,
            l: 1.0,
            max_steps: 200,
            theta: 0.0,
            theta_dot: 0.0,
            t: 0,
        }
    }

    pub fn set_angle(&mut self, theta: f64, theta_dot: f64) {
        self.theta = theta;
        self.theta_dot = theta_dot;
        self.t = 0;
    }

    pub fn angle(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    fn observe(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Mechanical energy per unit inertia, conserved by the torque-free flow.
    pub fn energy(&self) -> f64 {
        0.5 * self.theta_dot * self.theta_dot + 1.5 * self.g / self.l * self.theta.cos()
    }
}

impl Environment for Pendulum {
    fn state_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.max_torque], vec![self.max_torque])
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.theta = rng.random_range(-PI..PI);
        self.theta_dot = rng.random_range(-1.0..1.0);
        self.t = 0;
        self.observe()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let u = clip(action[0], -self.max_torque, self.max_torque);
        let th = angle_normalize(self.theta);
        let reward = -(th * th + 0.1 * self.theta_dot * self.theta_dot + 0.001 * u * u);
        let k = 3.0 * self.g / (2.0 * self.l);
        let c = 3.0 / (self.m * self.l * self.l) * u;
        let deriv = |th: f64, om: f64| (om, k * th.sin() + c);
        let h = self.dt / PENDULUM_SUBSTEPS as f64;
        let (mut th, mut om) = (self.theta, self.theta_dot);
        for _ in 0..PENDULUM_SUBSTEPS {
            let k1 = deriv(th, om);
            let k2 = deriv(th + 0.5 * h * k1.0, om + 0.5 * h * k1.1);
            let k3 = deriv(th + 0.5 * h * k2.0, om + 0.5 * h * k2.1);
            let k4 = deriv(th + h * k3.0, om + h * k3.1);
            th += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            om += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        self.theta = th;
        self.theta_dot = clip(om, -self.max_speed, self.max_speed);
        self.t += 1;
        Step {
            state: self.observe(),
            reward,
            terminal: false,
            truncated: self.t >= self.max_steps,
        }
    }

    fn input_scaling(&self) -> InputScaling {
        InputScaling {
            state: vec![1.0, 1.0, 1.0 / self.max_speed],
            action: vec![1.0 / self.max_torque],
        }
    }
}

/// RK4 substeps per control interval.
pub const PENDULUM_SUBSTEPS: usize = 4;

/// Cart-pole balancing with a continuous force; state `(x, ẋ, θ, θ̇)`.
#[derive(Debug, Clone)]
pub struct CartPole {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    pub half_length: f64,
    pub force_mag: f64,
    pub dt: f64,
    pub theta_limit: f64,
    pub x_limit: f64,
    pub max_steps: usize,
    state: [f64; 4],
    t: usize,
}

impl Default for CartPole {
    fn default() -> Self {
        Self::new()
    }
}

impl CartPole {
    pub fn new() -> Self {
        CartPole {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
            force_mag: 10.0,
            dt: 0.02,
            theta_limit: 12.0 * 2.0 * PI / 360.0,
            x_limit: 2.4,
            max_steps: 500,
            state: [0.0; 4],
            t: 0,
        }
    }

    pub fn set_state(&mut self, s: [f64; 4]) {
        self.state = s;
        self.t = 0;
    }
}

impl Environment for CartPole {
    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-1.0], vec![1.0])
    }

    fn max_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in self.state.iter_mut() {
            *s = rng.random_range(-0.05..0.05);
        }
        self.t = 0;
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let force = clip(action[0], -1.0, 1.0) * self.force_mag;
        let [x, x_dot, theta, theta_dot] = self.state;
        let total_mass = self.mass_cart + self.mass_pole;
        let pole_ml = self.mass_pole * self.half_length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pole_ml * theta_dot * theta_dot * sin) / total_mass;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.half_length * (4.0 / 3.0 - self.mass_pole * cos * cos / total_mass));
        let x_acc = temp - pole_ml * theta_acc * cos / total_mass;
        let x_dot = x_dot + self.dt * x_acc;
        let x = x + self.dt * x_dot;
        let theta_dot = theta_dot + self.dt * theta_acc;
        let theta = theta + self.dt * theta_dot;
        self.state = [x, x_dot, theta, theta_dot];
        self.t += 1;
        let terminal = x.abs() > self.x_limit || theta.abs() > self.theta_limit;
        Step {
            state: self.state.to_vec(),
            reward: 1.0,
            terminal,
            truncated: !terminal && self.t >= self.max_steps,
        }
    }

    fn input_scaling(&self) -> InputScaling {
        InputScaling {
            state: vec![1.0 / self.x_limit, 1.0 / 3.0, 1.0 / self.theta_limit, 1.0 / 3.0],
            action: vec![1.0],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_zero_action_no_noise_follows_powers() {
        let a = Mat::from_rows(&[[0.9, 0.1], [0.0, 0.8]]);
        let b = Mat::from_rows(&[[0.0], [1.0]]);
        let mut env = LinearGaussianEnv::new(a.clone(), b, 0.0, 1.0, 50);
        env.reset(3);
        env.set_state(&[1.0, -1.0]);
        let mut expected = vec![1.0, -1.0];
        for _ in 0..10 {
            let s = env.step(&[0.0]).state;
            expected = a.mul_vec(&expected).unwrap();
            for (x, y) in s.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_reward_at_origin_is_zero() {
        assert_eq!(LinearGaussianEnv::reward(&[0.0, 0.0], &[0.0]), 0.0);
        assert!((LinearGaussianEnv::reward(&[1.0, 2.0], &[1.0]) + 5.01).abs() < 1e-12);
    }

    #[test]
    fn linear_default_is_stable() {
        let env = LinearGaussianEnv::default();
        let a = &env.dynamics().a;
        // 2×2 eigenvalue moduli from trace and determinant
        let (tr, det) = (a[(0, 0)] + a[(1, 1)], a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)]);
        let disc = tr * tr - 4.0 * det;
        let radius = if disc < 0.0 { det.sqrt() } else { (tr.abs() + disc.sqrt()) / 2.0 };
        assert!(radius < 1.0);
    }

    #[test]
    fn reset_is_deterministic() {
        for name in [EnvName::Linear, EnvName::Pendulum, EnvName::Cartpole] {
            let mut e1 = name.build();
            let mut e2 = name.build();
            assert_eq!(e1.reset(17), e2.reset(17));
            let a = vec![0.3; e1.action_dim()];
            for _ in 0..5 {
                assert_eq!(e1.step(&a), e2.step(&a));
            }
        }
    }

    #[test]
    fn pendulum_hanging_rest_stays() {
        let mut p = Pendulum::new();
        p.set_angle(PI, 0.0);
        for _ in 0..100 {
            let s = p.step(&[0.0]);
            assert!((s.state[0] + 1.0).abs() < 1e-9);
            assert!(s.state[2].abs() < 1e-9);
        }
    }

    #[test]
    fn pendulum_energy_drift_is_small() {
        let mut p = Pendulum::new();
        p.set_angle(2.0, 0.0);
        let e0 = p.energy();
        let mut prev = e0;
        for _ in 0..200 {
            p.step(&[0.0]);
            let e = p.energy();
            assert!((e - prev).abs() < 1e-3, "step energy change {}", e - prev);
            prev = e;
        }
    }

    #[test]
    fn pendulum_reward_range() {
        let mut p = Pendulum::new();
        p.reset(0);
        for _ in 0..200 {
            let s = p.step(&[2.0]);
            assert!(s.reward <= 0.0 && s.reward >= -16.3);
        }
    }

    #[test]
    fn cartpole_upright_stays_near_upright() {
        let mut c = CartPole::new();
        c.set_state([0.0; 4]);
        for _ in 0..10 {
            let s = c.step(&[0.0]);
            assert!(!s.terminal);
            assert!(s.state[2].abs() < 1e-9);
        }
    }

    #[test]
    fn cartpole_terminates_when_falling() {
        let mut c = CartPole::new();
        c.set_state([0.0, 0.0, 0.1, 0.0]);
        let mut steps = 0;
        while !c.step(&[0.0]).terminal {
            steps += 1;
            assert!(steps < 200);
        }
    }

    #[test]
    fn env_names_parse() {
        assert_eq!("pendulum".parse::<EnvName>().unwrap(), EnvName::Pendulum);
        assert!("hopper".parse::<EnvName>().is_err());
    }
}

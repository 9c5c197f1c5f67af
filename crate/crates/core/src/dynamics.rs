//! Transition models and the surrogate likelihood used to fit them from
//! masked, noisy observation streams.
//!
//! The neural model maps `(s, a)` to a mean and a lower-triangular factor `G`
//! whose diagonal is kept strictly positive, so `GGᵀ` is positive definite for
//! any parameters. Its first layer (the trunk) is also the shared first layer
//! of the policy and value networks; see [`TransitionModel::features_input`].

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{filter_trajectory, BeliefError, MaskedObservation, SubPermutation};
use crate::linalg::{cholesky, solve_lower, solve_psd, Gaussian, LinalgError, Mat};
use crate::nn::{Activation, Checkpoint, Mlp, NnError};

/// Lower bound added to the softplus diagonal of every covariance factor.
pub const FACTOR_DIAG_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("quadrature oracle supports at most 2 state dimensions, got {0}")]
    TooManyDims(usize),
    #[error("model batch is empty")]
    EmptyBatch,
}

/// Gaussian transition `T(s' | s, a)` with a Gaussian initial belief.
pub trait Dynamics {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn transition(&self, state: &[f64], action: &[f64]) -> Gaussian;
    fn initial_belief(&self) -> Gaussian;
}

/// `s' = A s + B a + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianDynamics {
    pub a: Mat,
    pub b: Mat,
    pub q: Mat,
    pub init: Gaussian,
}

impl LinearGaussianDynamics {
    pub fn new(a: Mat, b: Mat, q: Mat, init: Gaussian) -> Result<Self, LinalgError> {
        let d = a.rows();
        for (what, found) in [
            (a.cols(), d),
            (b.rows(), d),
            (q.rows(), d),
            (q.cols(), d),
            (init.dim(), d),
        ] {
            if what != found {
                return Err(LinalgError::DimensionMismatch {
                    op: "LinearGaussianDynamics::new",
                    expected: d,
                    found: what,
                });
            }
        }
        Ok(LinearGaussianDynamics { a, b, q, init })
    }

    /// `s' = s`, `Q = c·I`, standard normal initial belief.
    pub fn identity(state_dim: usize, action_dim: usize, c: f64) -> Self {
        LinearGaussianDynamics {
            a: Mat::identity(state_dim),
            b: Mat::zeros(state_dim, action_dim),
            q: Mat::identity(state_dim).scale(c),
            init: Gaussian::standard(state_dim),
        }
    }

    pub fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let x = self.a.mul_vec(state).expect("state dimension");
        let u = self.b.mul_vec(action).expect("action dimension");
        x.iter().zip(&u).map(|(p, q)| p + q).collect()
    }
}

impl Dynamics for LinearGaussianDynamics {
    fn state_dim(&self) -> usize {
        self.a.rows()
    }

    fn action_dim(&self) -> usize {
        self.b.cols()
    }

    fn transition(&self, state: &[f64], action: &[f64]) -> Gaussian {
        Gaussian {
            mean: self.mean(state, action),
            cov: self.q.clone(),
        }
    }

    fn initial_belief(&self) -> Gaussian {
        self.init.clone()
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Number of entries in a `d × d` lower triangle.
pub fn tri_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Lower-triangular factor from its raw row-major entries
/// `(0,0), (1,0), (1,1), (2,0), …`; diagonal entries pass through softplus
/// plus [`FACTOR_DIAG_FLOOR`].
pub fn factor_from_raw(raw: &[f64], d: usize) -> Mat {
    assert_eq!(raw.len(), tri_len(d));
    let mut g = Mat::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            g[(i, j)] = if i == j {
                softplus(raw[k]) + FACTOR_DIAG_FLOOR
            } else {
                raw[k]
            };
            k += 1;
        }
    }
    g
}

/// Chain rule from `∂L/∂G` to the raw entries.
fn factor_raw_grad(raw: &[f64], d_g: &Mat, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; tri_len(d)];
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            out[k] = if i == j {
                d_g[(i, j)] * sigmoid(raw[k])
            } else {
                d_g[(i, j)]
            };
            k += 1;
        }
    }
    out
}

/// Multiplicative scaling applied to network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

impl InputScaling {
    pub fn unit(state_dim: usize, action_dim: usize) -> Self {
        InputScaling {
            state: vec![1.0; state_dim],
            action: vec![1.0; action_dim],
        }
    }
}

/// Neural transition model with a learnable initial belief.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    state_dim: usize,
    action_dim: usize,
    /// Shared first layer, input `[state slot | spread slot | action slot]`.
    pub trunk: Mlp,
    /// Hidden layer plus linear output `[mean (D) | raw factor (D(D+1)/2)]`.
    pub head: Mlp,
    pub init_mean: Vec<f64>,
    pub init_factor: Vec<f64>,
    pub scaling: InputScaling,
}

impl TransitionModel {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        scaling: InputScaling,
        rng: &mut R,
    ) -> Self {
        let trunk_in = 2 * state_dim + action_dim;
        let trunk = Mlp::orthogonal(
            &[trunk_in, hidden],
            Activation::Tanh,
            Activation::Tanh,
            2f64.sqrt(),
            2f64.sqrt(),
            rng,
        );
        let head = Mlp::orthogonal(
            &[hidden, hidden, state_dim + tri_len(state_dim)],
            Activation::Tanh,
            Activation::Identity,
            2f64.sqrt(),
            0.01,
            rng,
        );
        Self::from_parts(state_dim, action_dim, trunk, head, scaling)
    }

    /// Assembles a model around existing networks; the initial belief starts at
    /// `N(0, I)`.
    pub fn from_parts(
        state_dim: usize,
        action_dim: usize,
        trunk: Mlp,
        head: Mlp,
        scaling: InputScaling,
    ) -> Self {
        assert_eq!(trunk.input_dim(), 2 * state_dim + action_dim);
        assert_eq!(head.input_dim(), trunk.output_dim());
        assert_eq!(head.output_dim(), state_dim + tri_len(state_dim));
        let mut init_factor = vec![0.0; tri_len(state_dim)];
        let diag_raw = inverse_softplus(1.0 - FACTOR_DIAG_FLOOR);
        let mut k = 0;
        for i in 0..state_dim {
            for j in 0..=i {
                if i == j {
                    init_factor[k] = diag_raw;
                }
                k += 1;
            }
        }
        TransitionModel {
            state_dim,
            action_dim,
            trunk,
            head,
            init_mean: vec![0.0; state_dim],
            init_factor,
            scaling,
        }
    }

    pub fn hidden(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn trunk_input_dim(&self) -> usize {
        self.trunk.input_dim()
    }

    fn scaled_state(&self, s: &[f64], out: &mut Vec<f64>) {
        out.extend(s.iter().zip(&self.scaling.state).map(|(x, k)| x * k));
    }

    /// Trunk input for a transition query: `[s | 0 | a]`.
    pub fn transition_input(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.trunk_input_dim());
        self.scaled_state(s, &mut v);
        v.extend(std::iter::repeat_n(0.0, self.state_dim));
        v.extend(a.iter().zip(&self.scaling.action).map(|(x, k)| x * k));
        v
    }

    /// Trunk input for the policy and value heads from belief features
    /// `[μ | diag Σ]`: `[μ | sqrt(diag Σ) | 0]`.
    pub fn features_input(&self, features: &[f64]) -> Vec<f64> {
        let d = self.state_dim;
        assert_eq!(features.len(), 2 * d);
        let mut v = Vec::with_capacity(self.trunk_input_dim());
        self.scaled_state(&features[..d], &mut v);
        v.extend(
            features[d..]
                .iter()
                .zip(&self.scaling.state)
                .map(|(var, k)| var.max(0.0).sqrt() * k),
        );
        v.extend(std::iter::repeat_n(0.0, self.action_dim));
        v
    }

    /// Trunk input from a point estimate of the state: `[s | 0 | 0]`.
    pub fn state_input(&self, s: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.trunk_input_dim());
        self.scaled_state(s, &mut v);
        v.extend(std::iter::repeat_n(0.0, self.state_dim + self.action_dim));
        v
    }

    /// Splits head output into mean and factor.
    fn split_head(&self, out: &[f64]) -> (Vec<f64>, Mat) {
        let d = self.state_dim;
        (out[..d].to_vec(), factor_from_raw(&out[d..], d))
    }

    pub fn init_factor_matrix(&self) -> Mat {
        factor_from_raw(&self.init_factor, self.state_dim)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count()
            + self.head.param_count()
            + self.init_mean.len()
            + self.init_factor.len()
    }

    /// Flat parameter vector: trunk, head, initial mean, initial factor.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(self.trunk.params());
        p.extend_from_slice(self.head.params());
        p.extend_from_slice(&self.init_mean);
        p.extend_from_slice(&self.init_factor);
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<(), NnError> {
        if p.len() != self.param_count() {
            return Err(NnError::Shape {
                what: "TransitionModel::set_flat_params",
                expected: self.param_count(),
                found: p.len(),
            });
        }
        let (t, rest) = p.split_at(self.trunk.param_count());
        let (h, rest) = rest.split_at(self.head.param_count());
        let (m, f) = rest.split_at(self.state_dim);
        self.trunk.set_params(t)?;
        self.head.set_params(h)?;
        self.init_mean.copy_from_slice(m);
        self.init_factor.copy_from_slice(f);
        Ok(())
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.push_mlp("trunk", &self.trunk);
        ck.push_mlp("model_head", &self.head);
        ck.push_vec("init_mean", &self.init_mean);
        ck.push_vec("init_factor", &self.init_factor);
    }

    pub fn read_checkpoint(&mut self, ck: &Checkpoint) -> Result<(), NnError> {
        ck.load_mlp("trunk", &mut self.trunk)?;
        ck.load_mlp("model_head", &mut self.head)?;
        ck.load_vec("init_mean", &mut self.init_mean)?;
        ck.load_vec("init_factor", &mut self.init_factor)
    }
}

impl Dynamics for TransitionModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn transition(&self, state: &[f64], action: &[f64]) -> Gaussian {
        let h = self
            .trunk
            .infer(&self.transition_input(state, action))
            .expect("transition input dimension");
        let out = self.head.infer(&h).expect("head dimension");
        let (mean, g) = self.split_head(&out);
        let cov = g.matmul(&g.transpose()).unwrap().symmetrize();
        Gaussian { mean, cov }
    }

    fn initial_belief(&self) -> Gaussian {
        let g = self.init_factor_matrix();
        Gaussian {
            mean: self.init_mean.clone(),
            cov: g.matmul(&g.transpose()).unwrap().symmetrize(),
        }
    }
}

/// One likelihood term of the surrogate model objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelTerm {
    /// First observation of an episode, scored against the initial belief.
    Initial { obs: MaskedObservation },
    /// `x_{t+1}` scored against the model evaluated at the (frozen) belief
    /// mean `μ_t` and action `a_t`.
    Transition {
        belief_mean: Vec<f64>,
        action: Vec<f64>,
        next_obs: MaskedObservation,
    },
}

/// Gradient buffers matching [`TransitionModel::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub trunk: Vec<f64>,
    pub head: Vec<f64>,
    pub init_mean: Vec<f64>,
    pub init_factor: Vec<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &TransitionModel) -> Self {
        ModelGrads {
            trunk: vec![0.0; model.trunk.param_count()],
            head: vec![0.0; model.head.param_count()],
            init_mean: vec![0.0; model.init_mean.len()],
            init_factor: vec![0.0; model.init_factor.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.trunk.clone();
        v.extend_from_slice(&self.head);
        v.extend_from_slice(&self.init_mean);
        v.extend_from_slice(&self.init_factor);
        v
    }
}

/// `log N(W x | W m, W C Wᵀ)` with its gradients in `m` and `C`.
struct MaskedTerm {
    logp: f64,
    d_mean: Vec<f64>,
    d_cov: Mat,
}

fn masked_loglik(
    obs: &MaskedObservation,
    mean: &[f64],
    cov: &Mat,
) -> Result<Option<MaskedTerm>, LinalgError> {
    let w = SubPermutation::from_mask(obs.mask());
    let k = w.observed_count();
    if k == 0 {
        return Ok(None);
    }
    let s = w.select_square(cov).symmetrize();
    let l = cholesky(&s)?;
    let r: Vec<f64> = obs
        .observed_values()
        .iter()
        .zip(w.select(mean))
        .map(|(x, m)| x - m)
        .collect();
    let z = solve_lower(&l, &Mat::column(&r))?;
    let maha: f64 = z.as_slice().iter().map(|v| v * v).sum();
    let half_log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
    let logp = -0.5 * maha - half_log_det - 0.5 * k as f64 * (2.0 * PI).ln();

    let s_inv = solve_psd(&s, &Mat::identity(k))?.symmetrize();
    let alpha = s_inv.mul_vec(&r)?;
    let d_s = Mat::outer(&alpha, &alpha).sub(&s_inv)?.scale(0.5);
    Ok(Some(MaskedTerm {
        logp,
        d_mean: w.scatter(&alpha),
        d_cov: w.scatter_square(&d_s),
    }))
}

/// `∂L/∂G = 2 Γ G` for `C = G Gᵀ + const` and symmetric `Γ = ∂L/∂C`.
fn factor_grad(d_cov: &Mat, g: &Mat) -> Mat {
    d_cov.matmul(g).unwrap().scale(2.0)
}

/// Negated average log-likelihood over `terms`, accumulating
/// `scale · ∂loss/∂ψ` into `grads` when given.
pub fn model_loss_and_grad(
    model: &TransitionModel,
    terms: &[ModelTerm],
    noise_cov: &Mat,
    mut grads: Option<(&mut ModelGrads, f64)>,
) -> Result<f64, DynamicsError> {
    if terms.is_empty() {
        return Err(DynamicsError::EmptyBatch);
    }
    let n = terms.len() as f64;
    let d = model.state_dim;
    let mut total = 0.0;
    for term in terms {
        match term {
            ModelTerm::Initial { obs } => {
                let g = model.init_factor_matrix();
                let cov = g.matmul(&g.transpose())?.add(noise_cov)?;
                let Some(t) = masked_loglik(obs, &model.init_mean, &cov)? else {
                    continue;
                };
                total += t.logp;
                if let Some((buf, scale)) = grads.as_mut() {
                    let c = -*scale / n;
                    for (dst, v) in buf.init_mean.iter_mut().zip(&t.d_mean) {
                        *dst += c * v;
                    }
                    let raw = factor_raw_grad(&model.init_factor, &factor_grad(&t.d_cov, &g), d);
                    for (dst, v) in buf.init_factor.iter_mut().zip(&raw) {
                        *dst += c * v;
                    }
                }
            }
            ModelTerm::Transition {
                belief_mean,
                action,
                next_obs,
            } => {
                if next_obs.missing_count() == d {
                    continue;
                }
                let trunk_tape = model
                    .trunk
                    .forward_tape(&model.transition_input(belief_mean, action))?;
                let head_tape = model.head.forward_tape(trunk_tape.output())?;
                let out = head_tape.output();
                let (mean, g) = model.split_head(out);
                let cov = g.matmul(&g.transpose())?.add(noise_cov)?;
                let Some(t) = masked_loglik(next_obs, &mean, &cov)? else {
                    continue;
                };
                total += t.logp;
                if let Some((buf, scale)) = grads.as_mut() {
                    let c = -*scale / n;
                    let raw = factor_raw_grad(&out[d..], &factor_grad(&t.d_cov, &g), d);
                    let out_grad: Vec<f64> = t
                        .d_mean
                        .iter()
                        .chain(raw.iter())
                        .map(|v| c * v)
                        .collect();
                    let h_grad = model.head.backward_tape(&head_tape, &out_grad, &mut buf.head)?;
                    model
                        .trunk
                        .backward_tape(&trunk_tape, &h_grad, &mut buf.trunk)?;
                }
            }
        }
    }
    Ok(-total / n)
}

/// Negated average surrogate log-likelihood.
pub fn model_loss(
    model: &TransitionModel,
    terms: &[ModelTerm],
    noise_cov: &Mat,
) -> Result<f64, DynamicsError> {
    model_loss_and_grad(model, terms, noise_cov, None)
}

/// Surrogate terms for one episode, with belief means from filtering under the
/// model's current parameters.
pub fn episode_terms<M: Dynamics + ?Sized>(
    model: &M,
    observations: &[MaskedObservation],
    actions: &[Vec<f64>],
    noise_cov: &Mat,
) -> Result<Vec<ModelTerm>, DynamicsError> {
    let beliefs = filter_trajectory(observations, actions, model, noise_cov)?;
    let mut terms = Vec::with_capacity(observations.len());
    if let Some(first) = observations.first() {
        terms.push(ModelTerm::Initial { obs: first.clone() });
    }
    for t in 0..observations.len().saturating_sub(1) {
        terms.push(ModelTerm::Transition {
            belief_mean: beliefs[t].mean().to_vec(),
            action: actions[t].clone(),
            next_obs: observations[t + 1].clone(),
        });
    }
    Ok(terms)
}

/// Summed surrogate log-likelihood of one episode (not averaged).
pub fn surrogate_loglik(
    model: &TransitionModel,
    observations: &[MaskedObservation],
    actions: &[Vec<f64>],
    noise_cov: &Mat,
) -> Result<f64, DynamicsError> {
    let terms = episode_terms(model, observations, actions, noise_cov)?;
    Ok(-model_loss(model, &terms, noise_cov)? * terms.len() as f64)
}

/// Tensor-product midpoint grid over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

impl QuadratureGrid {
    pub fn around(center: &[f64], half_width: f64, points: usize) -> Self {
        QuadratureGrid {
            lo: center.iter().map(|c| c - half_width).collect(),
            hi: center.iter().map(|c| c + half_width).collect(),
            points,
        }
    }

    fn nodes(&self) -> (Vec<Vec<f64>>, f64) {
        let d = self.lo.len();
        let steps: Vec<f64> = (0..d)
            .map(|i| (self.hi[i] - self.lo[i]) / self.points as f64)
            .collect();
        let axis = |i: usize| -> Vec<f64> {
            (0..self.points)
                .map(|k| self.lo[i] + (k as f64 + 0.5) * steps[i])
                .collect()
        };
        let nodes = match d {
            1 => axis(0).into_iter().map(|x| vec![x]).collect(),
            2 => {
                let (ax, ay) = (axis(0), axis(1));
                ax.iter()
                    .flat_map(|&x| ay.iter().map(move |&y| vec![x, y]))
                    .collect()
            }
            _ => unreachable!(),
        };
        (nodes, steps.iter().product())
    }
}

/// Gaussian with its Cholesky factor cached for repeated density evaluation.
struct PreparedGaussian {
    mean: Vec<f64>,
    chol: Mat,
    norm: f64,
}

impl PreparedGaussian {
    fn new(mean: Vec<f64>, cov: &Mat) -> Result<Self, LinalgError> {
        let chol = cholesky(cov)?;
        let half_log_det: f64 = chol.diagonal().iter().map(|v| v.ln()).sum();
        let norm = -half_log_det - 0.5 * mean.len() as f64 * (2.0 * PI).ln();
        Ok(PreparedGaussian { mean, chol, norm })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut z = [0.0f64; 2];
        let mut maha = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for k in 0..i {
                s -= self.chol[(i, k)] * z[k];
            }
            z[i] = s / self.chol[(i, i)];
            maha += z[i] * z[i];
        }
        self.norm - 0.5 * maha
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log P(x | s)` for the masked, noisy observation channel.
fn observation_loglik(
    obs: &MaskedObservation,
    w: &SubPermutation,
    noise: &Option<PreparedGaussian>,
    s: &[f64],
) -> f64 {
    match noise {
        None => 0.0,
        Some(g) => {
            let shifted: Vec<f64> = obs
                .observed_values()
                .iter()
                .zip(w.select(s))
                .map(|(x, m)| x - m)
                .collect();
            g.log_pdf(&shifted)
        }
    }
}

/// Exact `log P(x_{1:T} | a_{1:T})` by forward recursion over a quadrature
/// grid. Only for `D ≤ 2` and a positive-definite observation noise.
pub fn exact_loglik_oracle<M: Dynamics + ?Sized>(
    model: &M,
    observations: &[MaskedObservation],
    actions: &[Vec<f64>],
    noise_cov: &Mat,
    grid: &QuadratureGrid,
) -> Result<f64, DynamicsError> {
    let d = model.state_dim();
    if d > 2 {
        return Err(DynamicsError::TooManyDims(d));
    }
    if observations.is_empty() {
        return Err(DynamicsError::EmptyBatch);
    }
    let (nodes, cell) = grid.nodes();
    let log_cell = cell.ln();

    let obs_terms: Vec<(SubPermutation, Option<PreparedGaussian>)> = observations
        .iter()
        .map(|o| {
            let w = SubPermutation::from_mask(o.mask());
            let noise = if w.observed_count() == 0 {
                None
            } else {
                Some(PreparedGaussian::new(
                    vec![0.0; w.observed_count()],
                    &w.select_square(noise_cov),
                )?)
            };
            Ok((w, noise))
        })
        .collect::<Result<_, LinalgError>>()?;

    let init = model.initial_belief();
    let init = PreparedGaussian::new(init.mean, &init.cov)?;
    let (w0, n0) = &obs_terms[0];
    let mut log_alpha: Vec<f64> = nodes
        .iter()
        .map(|s| init.log_pdf(s) + observation_loglik(&observations[0], w0, n0, s))
        .collect();

    for t in 1..observations.len() {
        let prepared: Vec<PreparedGaussian> = nodes
            .iter()
            .map(|s| {
                let g = model.transition(s, &actions[t - 1]);
                PreparedGaussian::new(g.mean, &g.cov)
            })
            .collect::<Result<_, _>>()?;
        let (w, noise) = &obs_terms[t];
        log_alpha = nodes
            .iter()
            .map(|sj| {
                let pred = log_sum_exp(
                    prepared
                        .iter()
                        .zip(&log_alpha)
                        .map(|(p, la)| la + p.log_pdf(sj)),
                );
                pred + log_cell + observation_loglik(&observations[t], w, noise, sj)
            })
            .collect();
    }
    Ok(log_sum_exp(log_alpha.into_iter()) + log_cell)
}

//! Gaussian belief tracking from incomplete, noisy observations.
//!
//! The filter alternates two steps. [`propagate`] pushes the posterior mean
//! through the transition model to obtain the intermediate (predicted) belief,
//! and [`posterior_update`] conditions that belief on whichever coordinates of
//! the next observation are present. Missing coordinates are removed with a
//! sub-permutation matrix `W`, so the gain is
//!
//! ```text
//! F = Σ̃ Wᵀ [W (Σ̃ + Σε) Wᵀ]⁻¹ W
//! μ = μ̃ + F (x − μ̃)
//! Σ = Σ̃ − F Σ̃
//! ```
//!
//! The missingness model never enters the update: under MCAR or MAR the mask
//! probability does not depend on the latent state and cancels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::Dynamics;
use crate::linalg::{solve_psd, Gaussian, LinalgError, Mat};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BeliefError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("expected a {expected:?} belief, got {found:?}")]
    WrongKind {
        expected: BeliefKind,
        found: BeliefKind,
    },
    #[error("observation has {found} entries, belief has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{observations} observations cannot be paired with {actions} actions")]
    SequenceLength { observations: usize, actions: usize },
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<BeliefError>,
    },
}

/// Observation vector where each coordinate is either a value or missing.
///
/// Missing coordinates are stored as NaN so that a value is finite exactly
/// when its mask bit is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "Vec<Option<f64>>", from = "Vec<Option<f64>>")]
pub struct MaskedObservation {
    pub(crate) values: Vec<f64>,
    pub(crate) mask: Vec<bool>,
}

impl PartialEq for MaskedObservation {
    fn eq(&self, other: &Self) -> bool {
        self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.mask)
                .all(|((a, b), m)| !m || a == b)
    }
}

impl From<MaskedObservation> for Vec<Option<f64>> {
    fn from(o: MaskedObservation) -> Self {
        o.values
            .iter()
            .zip(&o.mask)
            .map(|(v, m)| m.then_some(*v))
            .collect()
    }
}

impl From<Vec<Option<f64>>> for MaskedObservation {
    fn from(v: Vec<Option<f64>>) -> Self {
        let values: Vec<f64> = v.iter().map(|x| x.unwrap_or(f64::NAN)).collect();
        let mask: Vec<bool> = v.iter().map(Option::is_some).collect();
        MaskedObservation::new(&values, &mask)
    }
}

impl MaskedObservation {
    /// Values at unmasked positions are discarded.
    pub fn new(values: &[f64], mask: &[bool]) -> Self {
        assert_eq!(values.len(), mask.len(), "values and mask differ in length");
        let values = values
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { f64::NAN })
            .collect();
        MaskedObservation {
            values,
            mask: mask.to_vec(),
        }
    }

    pub fn full(values: &[f64]) -> Self {
        Self::new(values, &vec![true; values.len()])
    }

    pub fn all_missing(dim: usize) -> Self {
        Self::new(&vec![0.0; dim], &vec![false; dim])
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.mask[i].then(|| self.values[i])
    }

    /// Number of missing coordinates.
    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|m| !**m).count()
    }

    /// Values with missing coordinates replaced by zero.
    pub fn zero_filled(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect()
    }

    /// Observed values in ascending index order, i.e. `W x`.
    pub fn observed_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.mask)
            .filter_map(|(&v, &m)| m.then_some(v))
            .collect()
    }
}

/// Selector for the observed coordinates of a `D`-vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPermutation {
    dim: usize,
    observed: Vec<usize>,
}

impl SubPermutation {
    pub fn from_mask(mask: &[bool]) -> Self {
        SubPermutation {
            dim: mask.len(),
            observed: mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn observed_indices(&self) -> &[usize] {
        &self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.len()
    }

    /// The `(D − M) × D` 0/1 matrix.
    pub fn matrix(&self) -> Mat {
        let mut w = Mat::zeros(self.observed.len(), self.dim);
        for (j, &i) in self.observed.iter().enumerate() {
            w[(j, i)] = 1.0;
        }
        w
    }

    /// `W v`.
    pub fn select(&self, v: &[f64]) -> Vec<f64> {
        self.observed.iter().map(|&i| v[i]).collect()
    }

    /// `W M Wᵀ`.
    pub fn select_square(&self, m: &Mat) -> Mat {
        let k = self.observed.len();
        let mut out = Mat::zeros(k, k);
        for (a, &i) in self.observed.iter().enumerate() {
            for (b, &j) in self.observed.iter().enumerate() {
                out[(a, b)] = m[(i, j)];
            }
        }
        out
    }

    /// `W M` (selects rows).
    pub fn select_rows(&self, m: &Mat) -> Mat {
        let mut out = Mat::zeros(self.observed.len(), m.cols());
        for (a, &i) in self.observed.iter().enumerate() {
            for c in 0..m.cols() {
                out[(a, c)] = m[(i, c)];
            }
        }
        out
    }

    /// `Wᵀ v` (zero in unobserved slots).
    pub fn scatter(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &x) in self.observed.iter().zip(v) {
            out[i] = x;
        }
        out
    }

    /// `Wᵀ M W`.
    pub fn scatter_square(&self, m: &Mat) -> Mat {
        let mut out = Mat::zeros(self.dim, self.dim);
        for (a, &i) in self.observed.iter().enumerate() {
            for (b, &j) in self.observed.iter().enumerate() {
                out[(i, j)] = m[(a, b)];
            }
        }
        out
    }
}

pub fn build_sub_permutation(mask: &[bool]) -> SubPermutation {
    SubPermutation::from_mask(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeliefKind {
    /// After conditioning on the current observation.
    Posterior,
    /// Predicted from the previous posterior, before the current observation.
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub gaussian: Gaussian,
    pub kind: BeliefKind,
}

impl BeliefState {
    pub fn intermediate(gaussian: Gaussian) -> Self {
        BeliefState {
            gaussian,
            kind: BeliefKind::Intermediate,
        }
    }

    pub fn posterior(gaussian: Gaussian) -> Self {
        BeliefState {
            gaussian,
            kind: BeliefKind::Posterior,
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.gaussian.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.gaussian.cov
    }

    pub fn dim(&self) -> usize {
        self.gaussian.dim()
    }

    fn expect(&self, kind: BeliefKind) -> Result<(), BeliefError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BeliefError::WrongKind {
                expected: kind,
                found: self.kind,
            })
        }
    }
}

/// Intermediate belief: the transition model evaluated at the posterior mean.
///
/// The previous posterior covariance does not enter; the predicted covariance
/// is whatever the model reports at that mean.
pub fn propagate<M: Dynamics + ?Sized>(
    prev: &BeliefState,
    action: &[f64],
    model: &M,
) -> Result<BeliefState, BeliefError> {
    prev.expect(BeliefKind::Posterior)?;
    let g = model.transition(prev.mean(), action);
    Ok(BeliefState::intermediate(g))
}

/// Gain `F = Σ̃ Wᵀ [W(Σ̃ + Σε)Wᵀ]⁻¹ W` for the observed coordinates.
pub fn filter_gain(
    prior_cov: &Mat,
    w: &SubPermutation,
    noise_cov: &Mat,
) -> Result<Mat, LinalgError> {
    let (k, _) = gain_factor(prior_cov, w, noise_cov)?;
    Ok(dense_gain(&k, w))
}

/// `K = Σ̃ Wᵀ S⁻¹` (D × k) and the innovation covariance `S`.
fn gain_factor(
    prior_cov: &Mat,
    w: &SubPermutation,
    noise_cov: &Mat,
) -> Result<(Mat, Mat), LinalgError> {
    let innovation = w.select_square(&prior_cov.add(noise_cov)?).symmetrize();
    // S⁻¹ W Σ̃ is (k × D); its transpose is Σ̃ Wᵀ S⁻¹ since both are symmetric.
    let rhs = w.select_rows(prior_cov);
    let solved = solve_psd(&innovation, &rhs)?;
    Ok((solved.transpose(), innovation))
}

fn dense_gain(k: &Mat, w: &SubPermutation) -> Mat {
    let d = w.dim();
    let mut f = Mat::zeros(d, d);
    for r in 0..d {
        for (a, &i) in w.observed_indices().iter().enumerate() {
            f[(r, i)] = k[(r, a)];
        }
    }
    f
}

/// Conditions an intermediate belief on a masked observation.
///
/// With no coordinate observed the intermediate belief is returned unchanged,
/// relabelled as a posterior.
pub fn posterior_update(
    inter: &BeliefState,
    obs: &MaskedObservation,
    noise_cov: &Mat,
) -> Result<BeliefState, BeliefError> {
    inter.expect(BeliefKind::Intermediate)?;
    let d = inter.dim();
    if obs.dim() != d {
        return Err(BeliefError::DimensionMismatch {
            expected: d,
            found: obs.dim(),
        });
    }
    let w = SubPermutation::from_mask(obs.mask());
    if w.observed_count() == 0 {
        return Ok(BeliefState::posterior(inter.gaussian.clone()));
    }
    let prior = &inter.gaussian;
    let (k, innovation) = gain_factor(&prior.cov, &w, noise_cov)?;

    // μ = μ̃ + Σ̃ Wᵀ α with α = S⁻¹ W(x − μ̃). On observed coordinates
    // W Σ̃ Wᵀ = S − W Σε Wᵀ, so μ_obs = x_obs − W Σε Wᵀ α, which avoids
    // round-off when the noise vanishes.
    let residual: Vec<f64> = obs
        .observed_values()
        .iter()
        .zip(w.select(&prior.mean))
        .map(|(x, m)| x - m)
        .collect();
    let alpha = solve_psd(&innovation, &Mat::column(&residual))?;
    let alpha = alpha.as_slice();
    let shift = prior.cov.mul_vec(&w.scatter(alpha))?;
    let mut mean: Vec<f64> = prior.mean.iter().zip(&shift).map(|(m, s)| m + s).collect();
    let noise_obs = w.select_square(noise_cov);
    let noise_alpha = noise_obs.mul_vec(alpha)?;
    for ((&i, x), na) in w
        .observed_indices()
        .iter()
        .zip(obs.observed_values())
        .zip(noise_alpha)
    {
        mean[i] = x - na;
    }

    let f = dense_gain(&k, &w);
    let cov = prior.cov.sub(&f.matmul(&prior.cov)?)?.symmetrize();
    Ok(BeliefState::posterior(Gaussian { mean, cov }))
}

/// Policy input: posterior mean followed by the diagonal of the covariance.
pub fn belief_features(b: &BeliefState) -> Vec<f64> {
    let mut out = b.mean().to_vec();
    out.extend(b.cov().diagonal());
    out
}

/// Runs the filter over one episode starting from the model's initial belief.
///
/// `actions[t]` is the action taken after observing `observations[t]`; a
/// trailing action beyond the last observation is ignored.
pub fn filter_trajectory<M: Dynamics + ?Sized>(
    observations: &[MaskedObservation],
    actions: &[Vec<f64>],
    model: &M,
    noise_cov: &Mat,
) -> Result<Vec<BeliefState>, BeliefError> {
    let n = observations.len();
    if !(actions.len() + 1 == n || actions.len() == n) {
        return Err(BeliefError::SequenceLength {
            observations: n,
            actions: actions.len(),
        });
    }
    let at = |step: usize| move |e: BeliefError| BeliefError::AtStep {
        step,
        source: Box::new(e),
    };
    let mut out = Vec::with_capacity(n);
    let mut prior = BeliefState::intermediate(model.initial_belief());
    for (t, obs) in observations.iter().enumerate() {
        let post = posterior_update(&prior, obs, noise_cov).map_err(at(t))?;
        if t + 1 < n {
            prior = propagate(&post, &actions[t], model).map_err(at(t))?;
        }
        out.push(post);
    }
    Ok(out)
}

/// Step-by-step filter used while acting in an environment.
#[derive(Debug, Clone)]
pub struct BeliefFilter {
    noise_cov: Mat,
    prior: BeliefState,
    posterior: Option<BeliefState>,
}

impl BeliefFilter {
    pub fn new<M: Dynamics + ?Sized>(model: &M, noise_cov: Mat) -> Self {
        BeliefFilter {
            noise_cov,
            prior: BeliefState::intermediate(model.initial_belief()),
            posterior: None,
        }
    }

    /// Restarts from the model's initial belief.
    pub fn reset<M: Dynamics + ?Sized>(&mut self, model: &M) {
        self.prior = BeliefState::intermediate(model.initial_belief());
        self.posterior = None;
    }

    pub fn observe(&mut self, obs: &MaskedObservation) -> Result<&BeliefState, BeliefError> {
        let post = posterior_update(&self.prior, obs, &self.noise_cov)?;
        Ok(self.posterior.insert(post))
    }

    pub fn advance<M: Dynamics + ?Sized>(
        &mut self,
        action: &[f64],
        model: &M,
    ) -> Result<&BeliefState, BeliefError> {
        let post = self.posterior.as_ref().ok_or(BeliefError::WrongKind {
            expected: BeliefKind::Posterior,
            found: BeliefKind::Intermediate,
        })?;
        self.prior = propagate(post, action, model)?;
        self.posterior = None;
        Ok(&self.prior)
    }

    pub fn posterior(&self) -> Option<&BeliefState> {
        self.posterior.as_ref()
    }

    pub fn noise_cov(&self) -> &Mat {
        &self.noise_cov
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearGaussianDynamics;
    use approx::assert_abs_diff_eq;

    fn inter(mean: &[f64], cov: Mat) -> BeliefState {
        BeliefState::intermediate(Gaussian::new(mean.to_vec(), cov).unwrap())
    }

    #[test]
    fn sub_permutation_worked_example() {
        let obs = MaskedObservation::new(&[1.0, 0.0, 2.0], &[true, false, true]);
        let w = build_sub_permutation(obs.mask());
        assert_eq!(
            w.matrix(),
            Mat::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        );
        assert_eq!(w.select(&[1.0, 9.0, 2.0]), vec![1.0, 2.0]);
        assert_eq!(obs.observed_values(), vec![1.0, 2.0]);
        assert_eq!(obs.missing_count(), 1);
    }

    #[test]
    fn sub_permutation_edge_masks() {
        assert_eq!(
            build_sub_permutation(&[true; 3]).matrix(),
            Mat::identity(3)
        );
        let w = build_sub_permutation(&[false; 3]);
        assert_eq!(w.matrix().rows(), 0);
        assert_eq!(w.matrix().cols(), 3);
        assert_eq!(MaskedObservation::all_missing(3).missing_count(), 3);
    }

    #[test]
    fn sub_permutation_rows_are_orthonormal() {
        for bits in 0u32..16 {
            let mask: Vec<bool> = (0..4).map(|i| bits & (1 << i) != 0).collect();
            let w = build_sub_permutation(&mask).matrix();
            let wwt = w.matmul(&w.transpose()).unwrap();
            assert_eq!(wwt, Mat::identity(w.rows()));
        }
    }

    #[test]
    fn collapse_without_noise_or_missing() {
        let prior = inter(&[0.3, -1.0], Mat::from_rows(&[[2.0, 0.3], [0.3, 1.0]]));
        let obs = MaskedObservation::full(&[1.5, 0.5]);
        let post = posterior_update(&prior, &obs, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(post.mean(), &[1.5, 0.5]);
        assert!(post.cov().frobenius_norm() < 1e-12);
    }

    #[test]
    fn full_mask_gain_reduces() {
        let sigma = Mat::from_rows(&[[1.0, 0.2], [0.2, 0.5]]);
        let noise = Mat::from_diag(&[0.1, 0.3]);
        let f = filter_gain(&sigma, &build_sub_permutation(&[true, true]), &noise).unwrap();
        let expected = solve_psd(&sigma.add(&noise).unwrap(), &sigma)
            .unwrap()
            .transpose();
        assert!(f.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn all_missing_is_identity() {
        let prior = inter(&[1.0, 2.0], Mat::identity(2));
        let post =
            posterior_update(&prior, &MaskedObservation::all_missing(2), &Mat::identity(2))
                .unwrap();
        assert_eq!(post.gaussian, prior.gaussian);
        assert_eq!(post.kind, BeliefKind::Posterior);
    }

    #[test]
    fn masked_values_are_never_read() {
        let prior = inter(&[0.0, 1.0, -1.0], Mat::identity(3));
        let noise = Mat::identity(3).scale(0.01);
        let clean = MaskedObservation::new(&[0.5, 0.0, 0.7], &[true, false, true]);
        let mut junk = clean.clone();
        junk.values[1] = 1e6;
        let a = posterior_update(&prior, &clean, &noise).unwrap();
        let b = posterior_update(&prior, &junk, &noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_monotonicity_one_dimensional() {
        let prior = inter(&[0.0], Mat::identity(1));
        let obs = MaskedObservation::full(&[1.0]);
        let mut last_gain = f64::INFINITY;
        let mut last_var = 0.0;
        for noise in [0.0, 0.01, 0.1, 1.0, 10.0] {
            let nc = Mat::identity(1).scale(noise);
            let f = filter_gain(prior.cov(), &build_sub_permutation(&[true]), &nc).unwrap();
            let post = posterior_update(&prior, &obs, &nc).unwrap();
            assert!(f[(0, 0)] < last_gain);
            assert!(post.cov()[(0, 0)] >= last_var);
            last_gain = f[(0, 0)];
            last_var = post.cov()[(0, 0)];
        }
    }

    #[test]
    fn one_observed_coordinate_matches_scalar_conditioning() {
        let prior = inter(&[0.0, 0.0], Mat::identity(2));
        let noise = Mat::identity(2).scale(0.01);
        let obs = MaskedObservation::new(&[0.8, 0.0], &[true, false]);
        let post = posterior_update(&prior, &obs, &noise).unwrap();
        // prior var 1, noise var 0.01
        let k = 1.0 / 1.01;
        assert_abs_diff_eq!(post.mean()[0], k * 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(post.cov()[(0, 0)], 1.0 - k, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(post.cov()[(1, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn features_layout() {
        let b = BeliefState::posterior(
            Gaussian::new(vec![1.0, 2.0], Mat::from_diag(&[0.1, 0.2])).unwrap(),
        );
        assert_eq!(belief_features(&b), vec![1.0, 2.0, 0.1, 0.2]);
        let z = BeliefState::posterior(Gaussian::new(vec![3.0, 4.0], Mat::zeros(2, 2)).unwrap());
        assert_eq!(belief_features(&z), vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn propagate_requires_posterior() {
        let model = LinearGaussianDynamics::identity(2, 1, 0.5);
        let prior = inter(&[0.0, 0.0], Mat::identity(2));
        assert!(matches!(
            propagate(&prior, &[0.0], &model),
            Err(BeliefError::WrongKind { .. })
        ));
    }

    #[test]
    fn propagate_identity_dynamics() {
        let model = LinearGaussianDynamics::identity(2, 1, 0.5);
        let post = BeliefState::posterior(
            Gaussian::new(vec![1.0, -2.0], Mat::identity(2).scale(3.0)).unwrap(),
        );
        let next = propagate(&post, &[0.7], &model).unwrap();
        assert_eq!(next.mean(), &[1.0, -2.0]);
        assert_eq!(next.cov(), &Mat::identity(2).scale(0.5));
        assert_eq!(next.kind, BeliefKind::Intermediate);
    }

    #[test]
    fn propagate_linear_uses_mean_only() {
        let a = Mat::from_rows(&[[0.9, 0.1], [0.0, 0.8]]);
        let b = Mat::from_rows(&[[0.0], [0.5]]);
        let q = Mat::identity(2).scale(0.2);
        let model = LinearGaussianDynamics::new(a, b, q.clone(), Gaussian::standard(2)).unwrap();
        let post = BeliefState::posterior(
            Gaussian::new(vec![1.0, 2.0], Mat::identity(2).scale(5.0)).unwrap(),
        );
        let next = propagate(&post, &[2.0], &model).unwrap();
        assert_abs_diff_eq!(next.mean()[0], 0.9 + 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(next.mean()[1], 1.6 + 1.0, epsilon = 1e-12);
        assert_eq!(next.cov(), &q);
    }

    #[test]
    fn filter_single_observation() {
        let model = LinearGaussianDynamics::identity(2, 1, 0.5);
        let obs = vec![MaskedObservation::full(&[0.4, -0.4])];
        let noise = Mat::identity(2).scale(0.1);
        let beliefs = filter_trajectory(&obs, &[], &model, &noise).unwrap();
        assert_eq!(beliefs.len(), 1);
        let direct = posterior_update(
            &BeliefState::intermediate(model.initial_belief()),
            &obs[0],
            &noise,
        )
        .unwrap();
        assert_eq!(beliefs[0], direct);
    }

    #[test]
    fn filter_rejects_bad_lengths() {
        let model = LinearGaussianDynamics::identity(1, 1, 0.5);
        let obs = vec![MaskedObservation::full(&[0.0])];
        let actions = vec![vec![0.0]; 3];
        assert!(matches!(
            filter_trajectory(&obs, &actions, &model, &Mat::identity(1)),
            Err(BeliefError::SequenceLength { .. })
        ));
    }

    #[test]
    fn stepwise_filter_matches_batch() {
        let model = LinearGaussianDynamics::identity(2, 1, 0.3);
        let noise = Mat::identity(2).scale(0.05);
        let obs = vec![
            MaskedObservation::full(&[0.1, 0.2]),
            MaskedObservation::new(&[0.0, 0.5], &[false, true]),
            MaskedObservation::all_missing(2),
            MaskedObservation::full(&[1.0, 1.0]),
        ];
        let actions = vec![vec![0.0]; 3];
        let batch = filter_trajectory(&obs, &actions, &model, &noise).unwrap();
        let mut f = BeliefFilter::new(&model, noise);
        for (t, o) in obs.iter().enumerate() {
            assert_eq!(f.observe(o).unwrap(), &batch[t]);
            if t < actions.len() {
                f.advance(&actions[t], &model).unwrap();
            }
        }
    }
}

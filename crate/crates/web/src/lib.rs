//! Browser demo. Every exported function takes and returns JSON so the page
//! needs no bindings beyond strings.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use birl_core::belief::{posterior_update, BeliefFilter, BeliefState, MaskedObservation};
use birl_core::corruption::{
    calibration_inputs, imputed_state_mse, CorruptionConfig, Mechanism, ObservationChannel,
};
use birl_core::env::{Environment, LinearGaussianEnv};
use birl_core::linalg::{Gaussian, Mat};
use birl_core::rl::fill_adjacent;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct FilterParams {
    pub mechanism: Mechanism,
    pub eta: f64,
    pub sigma: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            mechanism: Mechanism::Mar,
            eta: 0.3,
            sigma: 1.0,
            steps: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FilterTrace {
    pub truth: Vec<Vec<f64>>,
    /// `null` where a coordinate was missing.
    pub observed: Vec<Vec<Option<f64>>>,
    pub bi_mean: Vec<Vec<f64>>,
    pub bi_std: Vec<Vec<f64>>,
    pub fa: Vec<Vec<f64>>,
    pub actions: Vec<f64>,
    pub missing_fraction: f64,
    pub mse_bi: f64,
    pub mse_fa: f64,
}

/// Runs the linear environment under a corrupted observation channel and
/// tracks the state with the exact-model filter and with fill-adjacent.
pub fn filter_trace(p: &FilterParams) -> Result<FilterTrace, String> {
    let mut env = LinearGaussianEnv::default();
    let model = env.dynamics().clone();
    let d = env.state_dim();
    let bounds = env.action_bounds();
    let mechanism = if p.eta == 0.0 { Mechanism::None } else { p.mechanism };
    let cfg = CorruptionConfig::new(mechanism, p.eta, p.sigma, d, 1, &bounds, p.seed)
        .map_err(|e| e.to_string())?;
    let mut channel = ObservationChannel::new(cfg.clone(), p.seed);
    let mut filter = BeliefFilter::new(&model, cfg.noise_cov());
    let mut last = vec![0.0; d];

    let mut state = env.reset(p.seed);
    let mut action = vec![0.0];
    let mut out = FilterTrace {
        truth: Vec::new(),
        observed: Vec::new(),
        bi_mean: Vec::new(),
        bi_std: Vec::new(),
        fa: Vec::new(),
        actions: Vec::new(),
        missing_fraction: 0.0,
        mse_bi: 0.0,
        mse_fa: 0.0,
    };
    let mut missing = 0usize;
    for t in 0..p.steps.max(1) {
        let obs = channel.observe(&state, &action);
        missing += obs.mask().iter().filter(|&&m| !m).count();
        let post = filter.observe(&obs).map_err(|e| e.to_string())?;
        out.bi_mean.push(post.mean().to_vec());
        out.bi_std
            .push((0..d).map(|i| post.cov()[(i, i)].max(0.0).sqrt()).collect());
        out.fa.push(fill_adjacent(&obs, &mut last));
        out.observed.push((0..d).map(|i| obs.get(i)).collect());
        out.truth.push(state.clone());

        // slow open-loop excitation keeps the state moving
        action = vec![0.8 * (0.15 * t as f64).sin()];
        out.actions.push(action[0]);
        let step = env.step(&action);
        filter.advance(&action, &model).map_err(|e| e.to_string())?;
        let done = step.done();
        state = step.state;
        if done {
            break;
        }
    }
    out.missing_fraction = missing as f64 / (out.truth.len() * d) as f64;
    out.mse_bi = imputed_state_mse(&out.bi_mean, &out.truth).map_err(|e| e.to_string())?;
    out.mse_fa = imputed_state_mse(&out.fa, &out.truth).map_err(|e| e.to_string())?;
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct EllipseParams {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub observed: [bool; 2],
    pub values: [f64; 2],
    /// Standard deviation of the reading noise.
    pub noise_std: f64,
    /// Contour radius in standard deviations.
    pub radius: f64,
    pub points: usize,
}

impl Default for EllipseParams {
    fn default() -> Self {
        EllipseParams {
            mean: [0.0, 0.0],
            cov: [[1.0, 0.6], [0.6, 1.0]],
            observed: [true, false],
            values: [1.5, 0.0],
            noise_std: 0.3,
            radius: 2.0,
            points: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EllipseResult {
    pub prior_mean: [f64; 2],
    pub prior_cov: [[f64; 2]; 2],
    pub prior_contour: Vec<[f64; 2]>,
    pub posterior_mean: [f64; 2],
    pub posterior_cov: [[f64; 2]; 2],
    pub posterior_contour: Vec<[f64; 2]>,
}

/// Points on `{x : (x−m)ᵀ C⁻¹ (x−m) = r²}` from the closed-form 2×2 eigensystem.
pub fn contour(mean: [f64; 2], cov: [[f64; 2]; 2], radius: f64, points: usize) -> Vec<[f64; 2]> {
    let (a, b, c) = (cov[0][0], cov[0][1], cov[1][1]);
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let l1 = (half_tr + disc).max(0.0);
    let l2 = (half_tr - disc).max(0.0);
    let angle = 0.5 * (2.0 * b).atan2(a - c);
    let (s, co) = angle.sin_cos();
    let (r1, r2) = (radius * l1.sqrt(), radius * l2.sqrt());
    (0..=points)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / points as f64;
            let (u, v) = (r1 * t.cos(), r2 * t.sin());
            [mean[0] + co * u - s * v, mean[1] + s * u + co * v]
        })
        .collect()
}

fn to_array(g: &Gaussian) -> ([f64; 2], [[f64; 2]; 2]) {
    (
        [g.mean[0], g.mean[1]],
        [[g.cov[(0, 0)], g.cov[(0, 1)]], [g.cov[(1, 0)], g.cov[(1, 1)]]],
    )
}

pub fn posterior_ellipse(p: &EllipseParams) -> Result<EllipseResult, String> {
    if !(p.noise_std >= 0.0) {
        return Err(format!("noise_std must be non-negative, got {}", p.noise_std));
    }
    let c = p.cov;
    if c[0][1] != c[1][0] || c[0][0] < 0.0 || c[1][1] < 0.0 || c[0][0] * c[1][1] < c[0][1] * c[0][1] {
        return Err("prior covariance must be symmetric positive semi-definite".into());
    }
    let prior = Gaussian::new(p.mean.to_vec(), Mat::from_rows(&p.cov)).map_err(|e| e.to_string())?;
    let obs = MaskedObservation::new(&p.values, &p.observed);
    let noise = Mat::identity(2).scale(p.noise_std * p.noise_std);
    let post = posterior_update(&BeliefState::intermediate(prior), &obs, &noise)
        .map_err(|e| e.to_string())?;
    let (pm, pc) = to_array(&post.gaussian);
    let points = p.points.clamp(8, 1024);
    Ok(EllipseResult {
        prior_mean: p.mean,
        prior_cov: p.cov,
        prior_contour: contour(p.mean, p.cov, p.radius, points),
        posterior_mean: pm,
        posterior_cov: pc,
        posterior_contour: contour(pm, pc, p.radius, points),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CalibrationParams {
    pub mechanism: Mechanism,
    pub etas: Vec<f64>,
    pub seed: u64,
}

impl Default for CalibrationParams {
    fn default() -> Self {
        CalibrationParams {
            mechanism: Mechanism::Mar,
            etas: (1..=9).map(|k| k as f64 * 0.05).collect(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationPoint {
    pub eta: f64,
    pub xi: f64,
    /// Max missing probability on a fresh sample set.
    pub achieved: f64,
    /// Mean missing probability per state coordinate on the same set.
    pub mean_missing: Vec<f64>,
}

/// Calibrates the linear environment's missingness model for each target
/// ratio and re-measures it on inputs the calibration never saw.
pub fn calibration_curve(p: &CalibrationParams) -> Result<Vec<CalibrationPoint>, String> {
    let env = LinearGaussianEnv::default();
    let bounds = env.action_bounds();
    let d = env.state_dim();
    p.etas
        .iter()
        .map(|&eta| {
            let cfg = CorruptionConfig::new(p.mechanism, eta, 0.0, d, 1, &bounds, p.seed)
                .map_err(|e| e.to_string())?;
            let fresh = calibration_inputs(&cfg, &bounds, p.seed.wrapping_add(1));
            let mean_missing = (0..d)
                .map(|i| {
                    fresh
                        .iter()
                        .map(|(x, a)| 1.0 - cfg.observe_prob(i, x, a))
                        .sum::<f64>()
                        / fresh.len() as f64
                })
                .collect();
            Ok(CalibrationPoint {
                eta,
                xi: cfg.xi,
                achieved: cfg.max_missing_prob(&fresh),
                mean_missing,
            })
        })
        .collect()
}

fn run<P, R>(json: &str, f: impl FnOnce(&P) -> Result<R, String>) -> Result<String, JsError>
where
    P: for<'de> Deserialize<'de>,
    R: Serialize,
{
    let params: P = serde_json::from_str(json).map_err(|e| JsError::new(&e.to_string()))?;
    let result = f(&params).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&result).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = filterTrace)]
pub fn filter_trace_json(params: &str) -> Result<String, JsError> {
    run(params, filter_trace)
}

#[wasm_bindgen(js_name = posteriorEllipse)]
pub fn posterior_ellipse_json(params: &str) -> Result<String, JsError> {
    run(params, posterior_ellipse)
}

#[wasm_bindgen(js_name = calibrationCurve)]
pub fn calibration_curve_json(params: &str) -> Result<String, JsError> {
    run(params, calibration_curve)
}

//! Small fully-connected networks with hand-written backpropagation, the Adam
//! optimiser and a finite-difference gradient checker.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{what}: expected length {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("backward called before forward")]
    NoForward,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), NnError> {
    if expected == found {
        Ok(())
    } else {
        Err(NnError::Shape {
            what,
            expected,
            found,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Per-sample activations recorded by [`Mlp::forward_tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape always holds the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.acts[0]
    }
}

/// Multilayer perceptron. Hidden layers use `hidden`; the last layer uses
/// `output`. Parameters live in one flat vector, layer by layer, each layer
/// stored as its row-major weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
    #[serde(skip)]
    last: Option<Tape>,
}

impl Mlp {
    /// Zero-initialised network.
    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = param_count(widths);
        Mlp {
            widths: widths.to_vec(),
            hidden,
            output,
            params: vec![0.0; n],
            last: None,
        }
    }

    /// Orthogonal weights scaled by `hidden_gain` (last layer: `output_gain`),
    /// zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        hidden_gain: f64,
        output_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(widths, hidden, output);
        let layers = net.layer_count();
        let mut offset = 0;
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let gain = if l + 1 == layers {
                output_gain
            } else {
                hidden_gain
            };
            let w = orthogonal_matrix(fan_out, fan_in, rng);
            for (dst, v) in net.params[offset..offset + fan_in * fan_out]
                .iter_mut()
                .zip(w)
            {
                *dst = gain * v;
            }
            offset += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.last = None;
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), NnError> {
        check_len("Mlp::set_params", self.params.len(), p.len())?;
        self.params.copy_from_slice(p);
        self.last = None;
        Ok(())
    }

    fn layer_activation(&self, l: usize) -> Activation {
        if l + 1 == self.layer_count() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Forward pass recording activations, without touching the cache.
    pub fn forward_tape(&self, input: &[f64]) -> Result<Tape, NnError> {
        check_len("Mlp input", self.input_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(input.to_vec());
        let mut offset = 0;
        for l in 0..self.layer_count() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let act = self.layer_activation(l);
            let x = acts.last().unwrap();
            let y: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    act.apply(dot(row, x) + b[o])
                })
                .collect();
            acts.push(y);
            offset += n_in * n_out + n_out;
        }
        Ok(Tape { acts })
    }

    /// Output only.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_tape(input)?.acts.pop().unwrap())
    }

    /// Forward pass that caches activations for a later [`Mlp::backward`].
    pub fn forward(&mut self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let tape = self.forward_tape(input)?;
        let out = tape.output().to_vec();
        self.last = Some(tape);
        Ok(out)
    }

    /// Parameter gradient for the cached forward pass.
    pub fn backward(&self, output_grad: &[f64]) -> Result<Vec<f64>, NnError> {
        let tape = self.last.as_ref().ok_or(NnError::NoForward)?;
        let mut grads = vec![0.0; self.params.len()];
        self.backward_tape(tape, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `∂L/∂params` into `grads` and returns `∂L/∂input`.
    pub fn backward_tape(
        &self,
        tape: &Tape,
        output_grad: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        check_len("Mlp output gradient", self.output_dim(), output_grad.len())?;
        check_len("Mlp gradient buffer", self.params.len(), grads.len())?;
        let layers = self.layer_count();
        let mut offsets = Vec::with_capacity(layers);
        let mut offset = 0;
        for l in 0..layers {
            offsets.push(offset);
            offset += self.widths[l] * self.widths[l + 1] + self.widths[l + 1];
        }

        let mut delta: Vec<f64> = output_grad.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let act = self.layer_activation(l);
            let y = &tape.acts[l + 1];
            for (d, &yo) in delta.iter_mut().zip(y) {
                *d *= act.derivative_from_output(yo);
            }
            let x = &tape.acts[l];
            let off = offsets[l];
            let w = &self.params[off..off + n_in * n_out];
            {
                let (gw, gb) = grads[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, &xi) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *p += d * wi;
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `rows × cols` matrix with orthonormal rows (or columns, whichever
/// is shorter), from Gram-Schmidt on a Gaussian draw.
fn orthogonal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (n, m) = if rows >= cols {
        (cols, rows)
    } else {
        (rows, cols)
    };
    // n orthonormal vectors of length m
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= p * bi;
                }
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols {
                basis[c][r]
            } else {
                basis[r][c]
            };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        AdamState {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NnError> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    /// Adam update with an explicit learning rate (for annealing schedules).
    pub fn step_with_lr(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
    ) -> Result<(), NnError> {
        check_len("Adam params", self.m.len(), params.len())?;
        check_len("Adam grads", self.m.len(), grads.len())?;
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Smallest denominator in the relative error, so that coordinates whose true
/// gradient is zero are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `f` at `params`.
pub fn grad_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_error || rel.is_nan() {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_index: i,
                analytic: a,
                numeric,
            };
        }
    }
    report
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(groups: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in groups.iter_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Versioned dump of named parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub blocks: Vec<ParamBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    /// Layer widths for networks, `[len]` for plain vectors.
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new() -> Self {
        Checkpoint {
            version: Self::VERSION,
            blocks: Vec::new(),
        }
    }

    pub fn push_mlp(&mut self, name: &str, net: &Mlp) {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            widths: net.widths().to_vec(),
            params: net.params().to_vec(),
        });
    }

    pub fn push_vec(&mut self, name: &str, v: &[f64]) {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            widths: vec![v.len()],
            params: v.to_vec(),
        });
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock, NnError> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing block `{name}`")))
    }

    pub fn load_mlp(&self, name: &str, net: &mut Mlp) -> Result<(), NnError> {
        let b = self.block(name)?;
        if b.widths != net.widths() {
            return Err(NnError::Checkpoint(format!(
                "block `{name}` has widths {:?}, network has {:?}",
                b.widths,
                net.widths()
            )));
        }
        net.set_params(&b.params)
    }

    pub fn load_vec(&self, name: &str, dst: &mut [f64]) -> Result<(), NnError> {
        let b = self.block(name)?;
        check_len("checkpoint vector", dst.len(), b.params.len())?;
        dst.copy_from_slice(&b.params);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, NnError> {
        let c: Checkpoint =
            serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if c.version != Self::VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {}",
                c.version
            )));
        }
        Ok(c)
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

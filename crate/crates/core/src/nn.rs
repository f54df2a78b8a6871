//! Small dense networks with hand-written backpropagation and Adam.
//!
//! Parameters live in one flat `Vec<f64>`; layer `l` stores its weight
//! matrix row-major (`out x in`) followed by its bias vector.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::{ACTION_COUNT, SENSOR_COUNT};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub output: OutputKind,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, output: OutputKind) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Usage(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes, output })
    }

    pub fn policy(hidden: &[usize]) -> Self {
        let mut sizes = vec![SENSOR_COUNT];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_COUNT);
        Self {
            sizes,
            output: OutputKind::Softmax,
        }
    }

    pub fn value(hidden: &[usize]) -> Self {
        let mut sizes = vec![SENSOR_COUNT];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self {
            sizes,
            output: OutputKind::Identity,
        }
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Offset of layer `l`'s weights in the flat parameter vector.
    fn offset(&self, l: usize) -> usize {
        self.sizes[..=l]
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Network parameters together with their Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: MlpSpec,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[0]` is the input, `acts[l]` the tanh output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activation of the last layer (logits or the raw value).
    pub output: Vec<f64>,
}

impl Network {
    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            params: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// Orthogonal initialization: hidden layers use gain sqrt(2), the output
    /// layer `output_gain`; biases start at zero.
    pub fn orthogonal<R: Rng>(spec: MlpSpec, output_gain: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(spec);
        let layers = net.spec.layers();
        for l in 0..layers {
            let (fan_in, fan_out) = (net.spec.sizes[l], net.spec.sizes[l + 1]);
            let gain = if l + 1 == layers {
                output_gain
            } else {
                2f64.sqrt()
            };
            let w = orthogonal_matrix(fan_out, fan_in, rng);
            let off = net.spec.offset(l);
            for r in 0..fan_out {
                for c in 0..fan_in {
                    net.params[off + r * fan_in + c] = gain * w[(r, c)];
                }
            }
        }
        net
    }

    pub fn from_parts(spec: MlpSpec, params: Vec<f64>, m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        let n = spec.param_count();
        if params.len() != n || m.len() != n || v.len() != n {
            return Err(Error::Usage(format!(
                "parameter vectors must have length {n}"
            )));
        }
        Ok(Self {
            spec,
            params,
            m,
            v,
            step,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "parameter {i} is {}",
                self.params[i]
            ))),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.spec.inputs() {
            return Err(Error::Usage(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.spec.inputs()
            )));
        }
        self.check_finite()?;
        let layers = self.spec.layers();
        let mut acts = Vec::with_capacity(layers);
        let mut a = x.to_vec();
        for l in 0..layers {
            let mut z = self.affine(l, &a);
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
                acts.push(std::mem::replace(&mut a, z));
            } else {
                acts.push(a);
                return Ok(Trace { acts, output: z });
            }
        }
        unreachable!("a network has at least one layer")
    }

    fn affine(&self, l: usize, a: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
        let off = self.spec.offset(l);
        let w = &self.params[off..off + fan_in * fan_out];
        let b = &self.params[off + fan_in * fan_out..off + fan_out * (fan_in + 1)];
        w.chunks_exact(fan_in)
            .zip(b)
            .map(|(row, &bias)| bias + row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    }

    /// Accumulate into `grad` the gradient of a scalar whose derivative with
    /// respect to the last layer's pre-activation is `d_out`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        assert_eq!(d_out.len(), self.spec.outputs(), "output gradient size");
        let mut delta = d_out.to_vec();
        for l in (0..self.spec.layers()).rev() {
            let (fan_in, fan_out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
            let off = self.spec.offset(l);
            let a = &trace.acts[l];
            let (gw, gb) = grad[off..off + fan_out * (fan_in + 1)].split_at_mut(fan_in * fan_out);
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (g, &x) in gw[r * fan_in..(r + 1) * fan_in].iter_mut().zip(a) {
                        *g += d * x;
                    }
                }
                gb[r] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + fan_in * fan_out];
            let mut below = vec![0.0; fan_in];
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (s, &wv) in below.iter_mut().zip(&w[r * fan_in..(r + 1) * fan_in]) {
                        *s += d * wv;
                    }
                }
            }
            // tanh'(z) = 1 - tanh(z)^2, and acts[l] holds tanh(z).
            for (s, &t) in below.iter_mut().zip(a) {
                *s *= 1.0 - t * t;
            }
            delta = below;
        }
    }
}

/// A `rows x cols` matrix with orthonormal rows or columns, whichever is
/// shorter.
fn orthogonal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let (tall, wide) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, wide, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..wide {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        Self { probs, log_probs }
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, lp)| p * lp)
            .sum::<f64>()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// d log p(a) / d logits.
    pub fn log_prob_grad(&self, action: usize) -> Vec<f64> {
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| f64::from(u8::from(k == action)) - p)
            .collect()
    }

    /// d entropy / d logits.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let h = self.entropy();
        self.probs
            .iter()
            .zip(&self.log_probs)
            .map(|(p, lp)| if *p > 0.0 { -p * (lp + h) } else { 0.0 })
            .collect()
    }
}

pub fn policy_forward(net: &Network, observation: &[f64]) -> Result<CategoricalDist> {
    let trace = net.forward(observation)?;
    Ok(CategoricalDist::from_logits(&trace.output))
}

pub fn value_forward(net: &Network, observation: &[f64]) -> Result<f64> {
    Ok(net.forward(observation)?.output[0])
}

/// Inverse-CDF sample; returns the index and its log-probability.
pub fn sample_action<R: Rng>(dist: &CategoricalDist, rng: &mut R) -> (usize, f64) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            chosen = Some(i);
            acc += p;
            if u < acc {
                break;
            }
        }
    }
    let i = chosen.expect("distribution has positive mass");
    (i, dist.log_probs[i])
}

/// One bias-corrected Adam update.
pub fn adam_step(net: &mut Network, grad: &[f64], cfg: &AdamConfig) -> Result<()> {
    if grad.len() != net.params.len() {
        return Err(Error::Usage(format!(
            "gradient has {} entries, network has {} parameters",
            grad.len(),
            net.params.len()
        )));
    }
    net.step += 1;
    let t = net.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, m), v), &g) in net.params.iter_mut().zip(&mut net.m).zip(&mut net.v).zip(grad) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
    }
    net.check_finite()
}

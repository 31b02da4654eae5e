//! Trainable projection head `x -> z` (tanh MLP) with a linear classifier on
//! top of `z`, exact reverse-mode gradients, and AdamW/SGD updates.
//!
//! Train-mode forwards apply inverted dropout to the input of every dense
//! layer, with the mask drawn from a caller-supplied seed. Two Train-mode
//! forwards of the same input with different seeds give the augmented pair
//! used by the contrastive loss.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

const CHECKPOINT_FORMAT: &str = "tan-gcd-head";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense layer, `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| vector::dot(self.row(o), x) + self.bias[o])
            .collect()
    }

    /// Accumulate parameter gradients for upstream gradient `g` at input `x`
    /// and return the gradient with respect to `x`.
    fn backward(&self, x: &[f64], g: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &go) in g.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            vector::axpy(&mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim], go, x);
            grad.bias[o] += go;
            vector::axpy(&mut dx, go, self.row(o));
        }
        dx
    }

    fn is_finite(&self) -> bool {
        vector::all_finite(&self.weight) && vector::all_finite(&self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub n_classes: usize,
    pub dropout: f64,
    /// Std of Gaussian noise added to the input in Train mode.
    pub input_noise: f64,
}

impl HeadConfig {
    /// `input_dim -> 64 -> 32`, dropout 0.1.
    pub fn default_for(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64],
            output_dim: 32,
            n_classes,
            dropout: 0.1,
            input_noise: 0.0,
        }
    }
}

/// Projection MLP plus classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderHead {
    pub layers: Vec<Dense>,
    pub classifier: Dense,
    pub dropout: f64,
    pub input_noise: f64,
    /// Bumped on every parameter update; tapes from older versions are rejected.
    #[serde(skip)]
    version: u64,
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// Input seen by each dense layer, after dropout.
    inputs: Vec<Vec<f64>>,
    /// Inverted-dropout scale applied to each layer input (`None` in Eval mode).
    masks: Vec<Option<Vec<f64>>>,
    /// Layer pre-activations.
    pre: Vec<Vec<f64>>,
}

/// Gradient buffers shaped like an [`EncoderHead`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub layers: Vec<Dense>,
    pub classifier: Dense,
}

impl HeadGrads {
    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &HeadGrads) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            vector::axpy(a, 1.0, b);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        tensors_of(&self.layers, &self.classifier)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        tensors_of_mut(&mut self.layers, &mut self.classifier)
    }
}

fn tensors_of<'a>(layers: &'a [Dense], classifier: &'a Dense) -> Vec<&'a [f64]> {
    let mut v: Vec<&[f64]> = Vec::with_capacity(2 * layers.len() + 2);
    for l in layers.iter().chain(std::iter::once(classifier)) {
        v.push(&l.weight);
        v.push(&l.bias);
    }
    v
}

fn tensors_of_mut<'a>(layers: &'a mut [Dense], classifier: &'a mut Dense) -> Vec<&'a mut [f64]> {
    let mut v: Vec<&mut [f64]> = Vec::with_capacity(2 * layers.len() + 2);
    for l in layers.iter_mut().chain(std::iter::once(classifier)) {
        v.push(&mut l.weight);
        v.push(&mut l.bias);
    }
    v
}

impl EncoderHead {
    pub fn new(cfg: &HeadConfig, seed: u64) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.output_dim == 0 || cfg.n_classes == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], &mut rng))
            .collect();
        let classifier = Dense::glorot(cfg.output_dim, cfg.n_classes, &mut rng);
        Self::from_parts(layers, classifier, cfg.dropout, cfg.input_noise)
    }

    pub fn from_parts(layers: Vec<Dense>, classifier: Dense, dropout: f64, input_noise: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("head needs at least one dense layer"));
        }
        for w in layers.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Shape {
                    expected: w[0].out_dim,
                    actual: w[1].in_dim,
                });
            }
        }
        let out = layers.last().unwrap().out_dim;
        if classifier.in_dim != out {
            return Err(Error::Shape {
                expected: out,
                actual: classifier.in_dim,
            });
        }
        for l in layers.iter().chain(std::iter::once(&classifier)) {
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(Error::Shape {
                    expected: l.in_dim * l.out_dim,
                    actual: l.weight.len(),
                });
            }
            if !l.is_finite() {
                return Err(Error::NonFinite("head parameters"));
            }
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::config(format!("dropout must lie in [0, 1), got {dropout}")));
        }
        if !(input_noise >= 0.0 && input_noise.is_finite()) {
            return Err(Error::config("input_noise must be non-negative"));
        }
        Ok(Self {
            layers,
            classifier,
            dropout,
            input_noise,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.out_dim
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grads(&self) -> HeadGrads {
        HeadGrads {
            layers: self.layers.iter().map(|l| Dense::zeros(l.in_dim, l.out_dim)).collect(),
            classifier: Dense::zeros(self.classifier.in_dim, self.classifier.out_dim),
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        tensors_of(&self.layers, &self.classifier)
    }

    /// Mutable parameter access. Counts as an update: outstanding tapes go stale.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.version += 1;
        tensors_of_mut(&mut self.layers, &mut self.classifier)
    }

    /// Swap in a new classifier (e.g. when the number of clusters changes).
    pub fn set_classifier(&mut self, classifier: Dense) -> Result<()> {
        if classifier.in_dim != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                actual: classifier.in_dim,
            });
        }
        self.classifier = classifier;
        self.version += 1;
        Ok(())
    }

    pub fn forward(&self, x: &[f64], mode: Mode, noise_seed: u64) -> Result<(Vec<f64>, Tape)> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if !vector::all_finite(x) {
            return Err(Error::NonFinite("encoder input"));
        }
        let train = mode == Mode::Train;
        let mut rng = train.then(|| ChaCha8Rng::seed_from_u64(noise_seed));

        let mut h = x.to_vec();
        if let (Some(rng), true) = (rng.as_mut(), self.input_noise > 0.0) {
            let n = Normal::new(0.0, self.input_noise).expect("validated noise std");
            h.iter_mut().for_each(|v| *v += n.sample(rng));
        }

        let last = self.layers.len() - 1;
        let mut tape = Tape {
            version: self.version,
            inputs: Vec::with_capacity(self.layers.len()),
            masks: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = match rng.as_mut() {
                Some(rng) if self.dropout > 0.0 => {
                    let keep = 1.0 / (1.0 - self.dropout);
                    let m: Vec<f64> = (0..h.len())
                        .map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep })
                        .collect();
                    h.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            let pre = layer.apply(&h);
            let next = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|v| v.tanh()).collect()
            };
            tape.inputs.push(std::mem::replace(&mut h, next));
            tape.masks.push(mask);
            tape.pre.push(pre);
        }
        Ok((h, tape))
    }

    /// Eval-mode feature extraction.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x, Mode::Eval, 0).map(|(z, _)| z)
    }

    pub fn embed_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.embed(x)).collect()
    }

    /// Accumulate parameter gradients of a loss with gradient `dz` at the
    /// recorded forward pass; returns the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, dz: &[f64], grads: &mut HeadGrads) -> Result<Vec<f64>> {
        if tape.version != self.version {
            return Err(Error::invalid("stale tape: parameters changed since the forward pass"));
        }
        if dz.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                actual: dz.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut g = dz.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l != last {
                for (gi, p) in g.iter_mut().zip(&tape.pre[l]) {
                    let t = p.tanh();
                    *gi *= 1.0 - t * t;
                }
            }
            let mut dx = self.layers[l].backward(&tape.inputs[l], &g, &mut grads.layers[l]);
            if let Some(m) = &tape.masks[l] {
                dx.iter_mut().zip(m).for_each(|(d, s)| *d *= s);
            }
            g = dx;
        }
        Ok(g)
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.classifier.apply(z)
    }

    /// Accumulate classifier gradients for `dlogits` at features `z`; returns dL/dz.
    pub fn classifier_backward(&self, z: &[f64], dlogits: &[f64], grads: &mut HeadGrads) -> Vec<f64> {
        self.classifier.backward(z, dlogits, &mut grads.classifier)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            head: self.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            head: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format tag {:?}", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let h = ckpt.head;
        Self::from_parts(h.layers, h.classifier, h.dropout, h.input_noise)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    head: EncoderHead,
}

fn check_grads(grads: &[&[f64]]) -> Result<()> {
    if grads.iter().all(|g| vector::all_finite(g)) {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient"))
    }
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step(head: &mut EncoderHead, grads: &HeadGrads, lr: f64) -> Result<()> {
    let g = grads.tensors();
    check_grads(&g)?;
    for (p, g) in head.tensors_mut().into_iter().zip(g) {
        vector::axpy(p, -lr, g);
    }
    Ok(())
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update arbitrary parameter tensors. Moment buffers are (re)allocated
    /// when the tensor layout changes.
    pub fn step_tensors(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                expected: params.len(),
                actual: grads.len(),
            });
        }
        check_grads(grads)?;
        let layout_changed = self.m.len() != params.len()
            || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.len());
        if layout_changed {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, head: &mut EncoderHead, grads: &HeadGrads) -> Result<()> {
        let g = grads.tensors();
        self.step_tensors(head.tensors_mut(), &g)
    }

    /// Forget moment estimates (e.g. after the classifier was replaced).
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }
}

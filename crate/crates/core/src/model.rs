//! The student classifier: a one-hidden-layer tanh encoder followed by a
//! logistic projection, with closed-form gradients and exact
//! Hessian-vector products.
//!
//! Parameters live in a single flat vector in this order:
//!
//! | block              | length | indexing                  |
//! |--------------------|--------|---------------------------|
//! | encoder weights    | d * h  | `[i * h + j]`, input i → hidden j |
//! | encoder bias       | h      | `[j]`                     |
//! | projection weights | h      | `[j]`                     |
//! | projection bias    | 1      |                           |
//!
//! With `hidden_dim == 0` the encoder is the identity on features and the
//! model is plain (convex) logistic regression with `d + 1` parameters:
//! projection weights (d) then the bias.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{Example, ExampleId, Label};
use crate::vector::{axpy, dot, sigmoid};

/// Probabilities are kept inside `[PROB_CLAMP, 1 - PROB_CLAMP]` before any logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Zero selects the convex logistic-regression mode.
    pub hidden_dim: usize,
}

struct Layout {
    enc_w: Range<usize>,
    enc_b: Range<usize>,
    proj_w: Range<usize>,
    proj_b: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self { input_dim, hidden_dim }
    }

    pub fn convex(input_dim: usize) -> Self {
        Self { input_dim, hidden_dim: 0 }
    }

    pub fn is_convex(&self) -> bool {
        self.hidden_dim == 0
    }

    /// Dimension of `f_enc(x)`.
    pub fn encoding_dim(&self) -> usize {
        if self.is_convex() {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, h) = (self.input_dim, self.hidden_dim);
        if self.is_convex() {
            d + 1
        } else {
            d * h + h + h + 1
        }
    }

    fn layout(&self) -> Layout {
        let (d, h) = (self.input_dim, self.hidden_dim);
        if self.is_convex() {
            Layout { enc_w: 0..0, enc_b: 0..0, proj_w: 0..d, proj_b: d }
        } else {
            let enc_w = 0..d * h;
            let enc_b = enc_w.end..enc_w.end + h;
            let proj_w = enc_b.end..enc_b.end + h;
            let proj_b = proj_w.end;
            Layout { enc_w, enc_b, proj_w, proj_b }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub encoding: Vec<f64>,
    pub logit: f64,
    /// Logistic link of `logit`, clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentModel {
    arch: Architecture,
    params: Vec<f64>,
    /// Coefficient of the `l2 / 2 * |θ|²` penalty included in every per-example loss.
    l2: f64,
}

impl StudentModel {
    pub fn zeros(arch: Architecture, l2: f64) -> Self {
        Self { arch, params: vec![0.0; arch.param_count()], l2 }
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>, l2: f64) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch { expected: arch.param_count(), actual: params.len() });
        }
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::InvalidInput(format!("l2 must be finite and >= 0, got {l2}")));
        }
        Ok(Self { arch, params, l2 })
    }

    /// Gaussian fan-in initialisation of the encoder and projection weights, zero biases.
    /// Convex models start at zero.
    pub fn init_random(arch: Architecture, l2: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut model = Self::zeros(arch, l2);
        if arch.is_convex() {
            return model;
        }
        let layout = arch.layout();
        let enc = Normal::new(0.0, 1.0 / (arch.input_dim.max(1) as f64).sqrt()).unwrap();
        for w in &mut model.params[layout.enc_w] {
            *w = enc.sample(rng);
        }
        let proj = Normal::new(0.0, 1.0 / (arch.hidden_dim as f64).sqrt()).unwrap();
        for w in &mut model.params[layout.proj_w] {
            *w = proj.sample(rng);
        }
        model
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_params(self.arch, params, self.l2)
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, actual: features.len() });
        }
        Ok(())
    }

    fn check_direction(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), actual: v.len() });
        }
        Ok(())
    }

    /// Encoding and pre-sigmoid logit. Unchecked dimensions.
    fn activations(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let layout = self.arch.layout();
        let p = &self.params;
        if self.arch.is_convex() {
            let logit = dot(&p[layout.proj_w], x) + p[layout.proj_b];
            return (x.to_vec(), logit);
        }
        let h = self.arch.hidden_dim;
        let mut a = p[layout.enc_b.clone()].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, &p[layout.enc_w.start + i * h..layout.enc_w.start + (i + 1) * h], &mut a);
            }
        }
        for aj in &mut a {
            *aj = aj.tanh();
        }
        let logit = dot(&p[layout.proj_w], &a) + p[layout.proj_b];
        (a, logit)
    }

    pub fn forward(&self, features: &[f64]) -> Result<Forward> {
        self.check_features(features)?;
        let (encoding, logit) = self.activations(features);
        let probability = sigmoid(logit).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Ok(Forward { encoding, logit, probability })
    }

    /// `f_enc(x)`: the tanh hidden layer, or the features themselves in convex mode.
    pub fn encode(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        Ok(self.activations(features).0)
    }

    pub fn predict(&self, features: &[f64]) -> Result<Label> {
        Ok(Label::from_bool(self.forward(features)?.probability > 0.5))
    }

    pub fn penalty(&self) -> f64 {
        0.5 * self.l2 * dot(&self.params, &self.params)
    }

    /// Binary cross-entropy at `label_override` (or the observed label) plus the L2 penalty.
    pub fn loss(&self, example: &Example, label_override: Option<Label>) -> Result<f64> {
        let y = label_override.unwrap_or(example.observed_label);
        Ok(self.loss_at(&example.features, y)?)
    }

    pub fn loss_at(&self, features: &[f64], label: Label) -> Result<f64> {
        let p = self.forward(features)?.probability;
        Ok(cross_entropy(p, label) + self.penalty())
    }

    pub fn grad_loss(&self, example: &Example, label_override: Option<Label>) -> Result<Vec<f64>> {
        let y = label_override.unwrap_or(example.observed_label);
        self.grad_loss_at(&example.features, y)
    }

    pub fn grad_loss_at(&self, features: &[f64], label: Label) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let mut g = vec![0.0; self.params.len()];
        self.accumulate_data_grad(features, label.as_f64(), 1.0, &mut g);
        axpy(self.l2, &self.params, &mut g);
        Ok(g)
    }

    /// Adds `weight * ∇θ BCE(x, y)` into `out` and returns the unclamped probability.
    fn accumulate_data_grad(&self, x: &[f64], y: f64, weight: f64, out: &mut [f64]) -> f64 {
        let layout = self.arch.layout();
        let (a, logit) = self.activations(x);
        let p = sigmoid(logit);
        let r = weight * (p - y);
        axpy(r, &a, &mut out[layout.proj_w.clone()]);
        out[layout.proj_b] += r;
        if self.arch.is_convex() {
            return p;
        }
        let h = self.arch.hidden_dim;
        let w2 = &self.params[layout.proj_w];
        let delta: Vec<f64> = a.iter().zip(w2).map(|(aj, wj)| r * wj * (1.0 - aj * aj)).collect();
        axpy(1.0, &delta, &mut out[layout.enc_b]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let start = layout.enc_w.start + i * h;
                axpy(xi, &delta, &mut out[start..start + h]);
            }
        }
        p
    }

    /// Adds `weight * ∇²θ BCE(x, y) · v` into `out` (Pearlmutter's R-operator applied
    /// to the backward pass).
    fn accumulate_data_hvp(&self, x: &[f64], y: f64, v: &[f64], weight: f64, out: &mut [f64]) {
        let layout = self.arch.layout();
        let (a, logit) = self.activations(x);
        let p = sigmoid(logit);
        let r = p - y;
        let pw = &self.params;

        if self.arch.is_convex() {
            let r_logit = dot(&v[layout.proj_w.clone()], x) + v[layout.proj_b];
            let r_p = weight * p * (1.0 - p) * r_logit;
            axpy(r_p, x, &mut out[layout.proj_w]);
            out[layout.proj_b] += r_p;
            return;
        }

        let h = self.arch.hidden_dim;
        let w2 = &pw[layout.proj_w.clone()];
        let u2 = &v[layout.proj_w.clone()];
        // forward R-pass
        let mut r_z = v[layout.enc_b.clone()].to_vec();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let start = layout.enc_w.start + i * h;
                axpy(xi, &v[start..start + h], &mut r_z);
            }
        }
        let r_a: Vec<f64> = a.iter().zip(&r_z).map(|(aj, rz)| (1.0 - aj * aj) * rz).collect();
        let r_logit = dot(u2, &a) + dot(w2, &r_a) + v[layout.proj_b];
        let r_p = p * (1.0 - p) * r_logit;

        // backward R-pass
        for j in 0..h {
            out[layout.proj_w.start + j] += weight * (r_p * a[j] + r * r_a[j]);
        }
        out[layout.proj_b] += weight * r_p;
        let r_delta: Vec<f64> = (0..h)
            .map(|j| {
                let g1 = 1.0 - a[j] * a[j];
                weight * (r_p * w2[j] * g1 + r * u2[j] * g1 - 2.0 * r * w2[j] * a[j] * r_a[j])
            })
            .collect();
        axpy(1.0, &r_delta, &mut out[layout.enc_b]);
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let start = layout.enc_w.start + i * h;
                axpy(xi, &r_delta, &mut out[start..start + h]);
            }
        }
    }

    /// `(H + damping * I) v` where `H` is the mean per-example Hessian of the
    /// training loss (observed labels, penalty included) over `dataset`.
    pub fn hvp(&self, dataset: &[Example], v: &[f64], damping: f64) -> Result<Vec<f64>> {
        if dataset.is_empty() {
            return Err(Error::InvalidInput("hvp over an empty dataset".into()));
        }
        for ex in dataset {
            self.check_features(&ex.features)?;
        }
        self.check_direction(v)?;
        Ok(self.hvp_over(dataset.iter(), dataset.len(), v, damping))
    }

    /// HVP over a subset given by indices. Dimensions must already be validated.
    pub(crate) fn hvp_indices(&self, dataset: &[Example], indices: &[usize], v: &[f64], damping: f64) -> Vec<f64> {
        self.hvp_over(indices.iter().map(|&i| &dataset[i]), indices.len(), v, damping)
    }

    fn hvp_over<'a>(&self, examples: impl Iterator<Item = &'a Example>, n: usize, v: &[f64], damping: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        let weight = 1.0 / n as f64;
        for ex in examples {
            self.accumulate_data_hvp(&ex.features, ex.observed_label.as_f64(), v, weight, &mut out);
        }
        axpy(self.l2 + damping, v, &mut out);
        out
    }

    /// Materialised mean Hessian (without damping). Only offered in convex mode.
    pub fn convex_hessian(&self, dataset: &[Example]) -> Result<DMatrix<f64>> {
        if !self.arch.is_convex() {
            return Err(Error::NotConvex);
        }
        if dataset.is_empty() {
            return Err(Error::InvalidInput("Hessian over an empty dataset".into()));
        }
        let n = self.params.len();
        let mut hess = DMatrix::<f64>::zeros(n, n);
        let mut xt = vec![1.0; n];
        for ex in dataset {
            self.check_features(&ex.features)?;
            xt[..n - 1].copy_from_slice(&ex.features);
            let p = sigmoid(self.activations(&ex.features).1);
            let c = p * (1.0 - p) / dataset.len() as f64;
            for r in 0..n {
                for s in 0..n {
                    hess[(r, s)] += c * xt[r] * xt[s];
                }
            }
        }
        for i in 0..n {
            hess[(i, i)] += self.l2;
        }
        Ok(hess)
    }
}

pub(crate) fn cross_entropy(p: f64, label: Label) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    match label {
        Label::Offensive => -p.ln(),
        Label::NonOffensive => -(1.0 - p).ln(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub l2_regularization: f64,
    /// Width of the tanh encoder; 0 trains plain logistic regression.
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 3, batch_size: 16, learning_rate: 0.5, seed: 0, l2_regularization: 1e-3, hidden_dim: 8 }
    }
}

impl TrainConfig {
    pub fn validation_errors(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.epochs == 0 {
            errs.push(format!("{prefix}epochs: must be >= 1"));
        }
        if self.batch_size == 0 {
            errs.push(format!("{prefix}batch_size: must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("{prefix}learning_rate: must be finite and > 0"));
        }
        if !(self.l2_regularization >= 0.0 && self.l2_regularization.is_finite()) {
            errs.push(format!("{prefix}l2_regularization: must be finite and >= 0"));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelSource {
    Gold,
    Observed,
    /// Every training example must have an entry.
    Explicit(BTreeMap<ExampleId, Label>),
}

impl LabelSource {
    pub fn resolve(&self, example: &Example) -> Result<Label> {
        match self {
            LabelSource::Gold => Ok(example.gold_label),
            LabelSource::Observed => Ok(example.observed_label),
            LabelSource::Explicit(map) => map.get(&example.id).copied().ok_or(Error::MissingLabel(example.id)),
        }
    }
}

/// Parameter snapshot taken at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: StudentModel,
}

impl Checkpoint {
    pub fn params(&self) -> &[f64] {
        self.model.params()
    }
}

/// Mini-batch gradient descent with a seeded shuffle per epoch. Emits one
/// checkpoint per epoch; the returned model equals the last checkpoint.
pub fn train(dataset: &[Example], config: &TrainConfig, labels: &LabelSource) -> Result<(StudentModel, Vec<Checkpoint>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let errs = config.validation_errors("");
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let d = dataset[0].features.len();
    let targets: Vec<f64> = dataset
        .iter()
        .map(|ex| {
            if ex.features.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: ex.features.len() });
            }
            labels.resolve(ex).map(Label::as_f64)
        })
        .collect::<Result<_>>()?;

    let arch = Architecture::new(d, config.hidden_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = StudentModel::init_random(arch, config.l2_regularization, &mut rng);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0; arch.param_count()];

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let weight = 1.0 / chunk.len() as f64;
            let mut data_loss = 0.0;
            for &i in chunk {
                let y = targets[i];
                let p = model.accumulate_data_grad(&dataset[i].features, y, weight, &mut grad);
                data_loss += weight * cross_entropy(p, Label::from_bool(y > 0.5));
            }
            let loss = data_loss + model.penalty();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::DivergedTraining { epoch, batch, loss });
            }
            axpy(model.l2, &model.params.clone(), &mut grad);
            axpy(-config.learning_rate, &grad, &mut model.params);
        }
        checkpoints.push(Checkpoint { epoch, model: model.clone() });
    }
    Ok((model, checkpoints))
}

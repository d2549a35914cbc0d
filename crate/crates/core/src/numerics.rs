//! Flat parameter vectors, the small model family, and their analytic
//! gradients.
//!
//! Parameter layout (row-major throughout):
//!
//! * softmax regression: `W[num_classes][input_dim]`, then `b[num_classes]`.
//! * one-hidden-layer MLP: `W1[hidden][input_dim]`, `b1[hidden]`,
//!   `W2[num_classes][hidden]`, `b2[num_classes]`.
//!
//! Loss is mean cross-entropy over the batch, computed with a max-shifted
//! log-softmax.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard deviation of the Gaussian used for weight initialization.
pub const INIT_WEIGHT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns `self` scaled by `factor` (new vector).
    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// Fails with a numeric error naming `what` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite entry {} at index {i}",
                self.0[i]
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp1Hidden {
        hidden_dim: usize,
        #[serde(default)]
        activation: Activation,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1Hidden {
                hidden_dim,
                activation: Activation::Relu,
            },
            input_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model num_classes must be at least 2"));
        }
        if let ModelKind::Mlp1Hidden { hidden_dim: 0, .. } = self.kind {
            return Err(Error::config("model hidden_dim must be positive"));
        }
        Ok(())
    }

    /// Offsets of the bias blocks inside the flat layout, as `(start, len)`.
    pub fn bias_ranges(&self) -> Vec<(usize, usize)> {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::SoftmaxRegression => vec![(d * c, c)],
            ModelKind::Mlp1Hidden { hidden_dim: h, .. } => {
                vec![(d * h, h), (d * h + h + h * c, c)]
            }
        }
    }
}

pub fn param_count(spec: &ModelSpec) -> usize {
    let (d, c) = (spec.input_dim, spec.num_classes);
    match spec.kind {
        ModelKind::SoftmaxRegression => d * c + c,
        ModelKind::Mlp1Hidden { hidden_dim: h, .. } => d * h + h + h * c + c,
    }
}

/// Random initialization: weights ~ N(0, 0.01²), biases zero.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ParamVector {
    let normal = Normal::new(0.0, INIT_WEIGHT_SCALE).expect("valid normal");
    let mut values: Vec<f64> = (0..param_count(spec)).map(|_| normal.sample(rng)).collect();
    for (start, len) in spec.bias_ranges() {
        values[start..start + len].fill(0.0);
    }
    ParamVector(values)
}

/// A mini-batch: row-major inputs and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    feature_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, feature_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("batch must contain at least one sample"));
        }
        if feature_dim == 0 || inputs.len() != labels.len() * feature_dim {
            return Err(Error::config(format!(
                "batch has {} inputs for {} labels of dim {feature_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch {
            inputs,
            labels,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub loss: f64,
    pub grad: ParamVector,
}

fn check_dims(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    let expected = param_count(spec);
    if params.dim() != expected {
        return Err(Error::config(format!(
            "parameter vector has dim {} but model needs {expected}",
            params.dim()
        )));
    }
    if batch.feature_dim != spec.input_dim {
        return Err(Error::config(format!(
            "batch feature dim {} does not match model input dim {}",
            batch.feature_dim, spec.input_dim
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::config(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

/// `out = W x + b` for a row-major `W[rows][x.len()]`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Turns `logits` into softmax probabilities in place and returns
/// `-log p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l -= max;
        sum += l.exp();
    }
    let log_sum = sum.ln();
    let loss = log_sum - logits[label];
    for l in logits.iter_mut() {
        *l = (*l - log_sum).exp();
    }
    loss
}

struct Forward<'a> {
    spec: &'a ModelSpec,
    params: &'a [f64],
    hidden: Vec<f64>,
}

impl<'a> Forward<'a> {
    fn new(spec: &'a ModelSpec, params: &'a ParamVector) -> Self {
        let hidden = match spec.kind {
            ModelKind::SoftmaxRegression => Vec::new(),
            ModelKind::Mlp1Hidden { hidden_dim, .. } => vec![0.0; hidden_dim],
        };
        Forward {
            spec,
            params: params.as_slice(),
            hidden,
        }
    }

    /// Writes logits for `x` into `out`; keeps post-activation hidden units.
    fn logits(&mut self, x: &[f64], out: &mut [f64]) {
        let (d, c) = (self.spec.input_dim, self.spec.num_classes);
        match self.spec.kind {
            ModelKind::SoftmaxRegression => {
                let (w, b) = self.params.split_at(d * c);
                affine(w, b, x, out);
            }
            ModelKind::Mlp1Hidden { hidden_dim: h, .. } => {
                let (w1, rest) = self.params.split_at(d * h);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h * c);
                affine(w1, b1, x, &mut self.hidden);
                for z in self.hidden.iter_mut() {
                    *z = z.max(0.0);
                }
                affine(w2, b2, &self.hidden, out);
            }
        }
    }
}

/// Logits for every row of `inputs`, `num_classes` per row.
pub fn logits(spec: &ModelSpec, params: &ParamVector, inputs: &[f64]) -> Vec<f64> {
    let c = spec.num_classes;
    let rows = inputs.len() / spec.input_dim;
    let mut fwd = Forward::new(spec, params);
    let mut out = vec![0.0; rows * c];
    for (x, o) in inputs
        .chunks_exact(spec.input_dim)
        .zip(out.chunks_exact_mut(c))
    {
        fwd.logits(x, o);
    }
    out
}

/// Index of the largest logit; ties go to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn forward_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_dims(spec, params, batch)?;
    let mut fwd = Forward::new(spec, params);
    let mut logits = vec![0.0; spec.num_classes];
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        fwd.logits(batch.row(i), &mut logits);
        total += softmax_xent(&mut logits, y);
    }
    Ok(total / batch.len() as f64)
}

pub fn backward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<GradResult> {
    check_dims(spec, params, batch)?;
    let (d, c) = (spec.input_dim, spec.num_classes);
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.dim()];
    let mut fwd = Forward::new(spec, params);
    let mut probs = vec![0.0; c];
    let mut total = 0.0;

    for (i, &y) in batch.labels.iter().enumerate() {
        let x = batch.row(i);
        fwd.logits(x, &mut probs);
        total += softmax_xent(&mut probs, y);
        // dL/dlogits = (softmax - onehot) / n
        probs[y] -= 1.0;
        for p in probs.iter_mut() {
            *p /= n;
        }
        match spec.kind {
            ModelKind::SoftmaxRegression => {
                let (gw, gb) = grad.split_at_mut(d * c);
                for (k, &dl) in probs.iter().enumerate() {
                    for (g, &xv) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += dl * xv;
                    }
                    gb[k] += dl;
                }
            }
            ModelKind::Mlp1Hidden { hidden_dim: h, .. } => {
                let w2 = &params.as_slice()[d * h + h..d * h + h + h * c];
                let (gw1, rest) = grad.split_at_mut(d * h);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h * c);
                let hidden = &fwd.hidden;
                let mut dh = vec![0.0; h];
                for (k, &dl) in probs.iter().enumerate() {
                    let w2_row = &w2[k * h..(k + 1) * h];
                    for u in 0..h {
                        gw2[k * h + u] += dl * hidden[u];
                        dh[u] += dl * w2_row[u];
                    }
                    gb2[k] += dl;
                }
                for u in 0..h {
                    // ReLU derivative; post-activation 0 means the unit was off.
                    if hidden[u] <= 0.0 {
                        continue;
                    }
                    let dz = dh[u];
                    for (g, &xv) in gw1[u * d..(u + 1) * d].iter_mut().zip(x) {
                        *g += dz * xv;
                    }
                    gb1[u] += dz;
                }
            }
        }
    }

    Ok(GradResult {
        loss: total / n,
        grad: ParamVector(grad),
    })
}

/// `Σ coeffs[k] · vectors[k]`. Coefficients are unconstrained reals.
pub fn axpy_combination(coeffs: &[f64], vectors: &[&ParamVector]) -> Result<ParamVector> {
    if coeffs.is_empty() || coeffs.len() != vectors.len() {
        return Err(Error::config(format!(
            "combination needs matching non-empty inputs, got {} coefficients and {} vectors",
            coeffs.len(),
            vectors.len()
        )));
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::config(format!(
            "combination vectors differ in dim: {dim} vs {}",
            v.dim()
        )));
    }
    // Seed with the first term (not zeros) so a unit coefficient reproduces
    // its vector bit for bit, signed zeros included.
    let mut out = vectors[0].scaled(coeffs[0]);
    for (&a, v) in coeffs.iter().zip(vectors).skip(1) {
        for (o, &x) in out.0.iter_mut().zip(&v.0) {
            *o += a * x;
        }
    }
    Ok(out)
}

/// Heavy-ball SGD: `velocity ← momentum·velocity + grad; params ← params − lr·velocity`.
pub fn sgd_step(
    params: &mut ParamVector,
    grad: &ParamVector,
    lr: f64,
    momentum: f64,
    velocity: &mut ParamVector,
) {
    debug_assert_eq!(params.dim(), grad.dim());
    debug_assert_eq!(params.dim(), velocity.dim());
    for ((p, &g), v) in params.0.iter_mut().zip(&grad.0).zip(velocity.0.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

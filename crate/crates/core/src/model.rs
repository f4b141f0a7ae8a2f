//! Small differentiable models with hand-written backward passes.
//!
//! Every model is a stack of dense layers. Weights are stored row-major as
//! `(out, in)`, and each weight matrix and each bias vector is its own block.

use std::sync::Arc;

use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::{FlatStat, LayeredParams, Layout};
use crate::rng::{keyed_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearRegression,
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `0.5 * ||output - target||^2`, averaged over samples.
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input: usize,
    pub hidden: Vec<usize>,
    /// Number of classes, or output width for regression.
    pub classes: usize,
    pub activation: Activation,
    pub loss: Loss,
}

impl ModelSpec {
    pub fn logistic(input: usize, classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input,
            hidden: vec![],
            classes,
            activation: Activation::Relu,
            loss: Loss::CrossEntropy,
        }
    }

    pub fn mlp(input: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input,
            hidden,
            classes,
            activation,
            loss: Loss::CrossEntropy,
        }
    }

    pub fn linear_regression(input: usize, outputs: usize) -> Self {
        ModelSpec {
            kind: ModelKind::LinearRegression,
            input,
            hidden: vec![],
            classes: outputs,
            activation: Activation::Relu,
            loss: Loss::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(format!("model: {m}")));
        if self.input == 0 || self.classes == 0 || self.hidden.contains(&0) {
            return bad("layer sizes must be positive");
        }
        match self.kind {
            ModelKind::Mlp if self.hidden.is_empty() => return bad("mlp needs a hidden layer"),
            ModelKind::LinearRegression | ModelKind::Logistic if !self.hidden.is_empty() => {
                return bad("linear models take no hidden layers")
            }
            ModelKind::Logistic if self.loss != Loss::CrossEntropy => {
                return bad("logistic model uses cross-entropy")
            }
            _ => {}
        }
        if self.loss == Loss::CrossEntropy && self.classes < 2 {
            return bad("cross-entropy needs at least two classes");
        }
        Ok(())
    }

    /// Binary logistic regression carries one logit; the other class is
    /// pinned at zero.
    fn binary_logit(&self) -> bool {
        self.kind == ModelKind::Logistic && self.classes == 2
    }

    pub fn output_width(&self) -> usize {
        if self.binary_logit() {
            1
        } else {
            self.classes
        }
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input];
        widths.extend(&self.hidden);
        widths.push(self.output_width());
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn layout(&self) -> Arc<Layout> {
        let blocks =
            self.layer_dims()
                .into_iter()
                .enumerate()
                .flat_map(|(i, (fan_in, fan_out))| {
                    [
                        (format!("dense{i}.weight"), fan_in * fan_out),
                        (format!("dense{i}.bias"), fan_out),
                    ]
                });
        Arc::new(Layout::new(blocks).expect("validated spec has non-empty blocks"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    /// Row-major `(samples, width)` real targets.
    Real {
        values: Vec<f64>,
        width: usize,
    },
}

/// A row-major feature matrix with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    dim: usize,
    targets: Targets,
}

impl Batch {
    pub fn new(features: Vec<f64>, dim: usize, targets: Targets) -> Result<Self> {
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "{} feature values do not form rows of width {dim}",
                features.len()
            )));
        }
        let rows = features.len() / dim;
        let target_rows = match &targets {
            Targets::Classes(c) => c.len(),
            Targets::Real { values, width } => {
                if *width == 0 || values.len() % width != 0 {
                    return Err(Error::Validation("ragged real targets".into()));
                }
                values.len() / width
            }
        };
        if rows != target_rows {
            return Err(Error::Validation(format!(
                "{rows} feature rows but {target_rows} targets"
            )));
        }
        Ok(Batch {
            features,
            dim,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Copies the selected rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Real { values, width } => Targets::Real {
                values: indices
                    .iter()
                    .flat_map(|&i| values[i * width..(i + 1) * width].iter().copied())
                    .collect(),
                width: *width,
            },
        };
        Batch {
            features,
            dim: self.dim,
            targets,
        }
    }

    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let targets = match (&self.targets, &other.targets) {
            (Targets::Classes(a), Targets::Classes(b)) => {
                Targets::Classes(a.iter().chain(b).copied().collect())
            }
            (
                Targets::Real { values: a, width },
                Targets::Real {
                    values: b,
                    width: w2,
                },
            ) if width == w2 => Targets::Real {
                values: a.iter().chain(b).copied().collect(),
                width: *width,
            },
            _ => {
                return Err(Error::Validation(
                    "batches have different target kinds".into(),
                ))
            }
        };
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        Batch::new(features, self.dim, targets)
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.dim != spec.input {
            return Err(Error::Validation(format!(
                "batch width {} but model input {}",
                self.dim, spec.input
            )));
        }
        match &self.targets {
            Targets::Classes(c) => {
                if let Some(bad) = c.iter().find(|&&y| y >= spec.classes) {
                    return Err(Error::Validation(format!(
                        "label {bad} outside [0, {})",
                        spec.classes
                    )));
                }
            }
            Targets::Real { width, .. } => {
                if spec.loss != Loss::Mse || *width != spec.output_width() {
                    return Err(Error::Validation(
                        "real targets need an mse model of matching width".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Uniform `±1/sqrt(fan_in)` weights, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> LayeredParams {
    let layout = spec.layout();
    let mut params = LayeredParams::zeros(layout);
    let mut rng = keyed_rng(seed, Stream::Init, &[]);
    for (i, (fan_in, _)) in spec.layer_dims().into_iter().enumerate() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for w in params.block_mut(2 * i) {
            *w = rng.random_range(-bound..=bound);
        }
    }
    params
}

/// Post-activation output of every layer; the last entry holds raw logits.
struct Trace {
    outputs: Vec<Vec<f64>>,
}

fn forward_trace(spec: &ModelSpec, params: &LayeredParams, batch: &Batch) -> Result<Trace> {
    batch.check(spec)?;
    if params.layout().as_ref() != spec.layout().as_ref() {
        return Err(Error::Congruence(
            "parameters do not match the model".into(),
        ));
    }
    let dims = spec.layer_dims();
    let rows = batch.len();
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(dims.len());
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let input = if i == 0 {
            batch.features()
        } else {
            &outputs[i - 1]
        };
        let w = params.block(2 * i);
        let b = params.block(2 * i + 1);
        let mut out = vec![0.0; rows * fan_out];
        for s in 0..rows {
            let x = &input[s * fan_in..(s + 1) * fan_in];
            let z = &mut out[s * fan_out..(s + 1) * fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *zo = b[o] + dot(row, x);
            }
        }
        if i + 1 < dims.len() {
            match spec.activation {
                Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                Activation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
            }
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericOverflow {
                block: params.layout().name(2 * i).to_string(),
            });
        }
        outputs.push(out);
    }
    Ok(Trace { outputs })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-sample loss; writes dloss/dlogits into `grad` when given.
fn sample_loss(
    spec: &ModelSpec,
    logits: &[f64],
    targets: &Targets,
    s: usize,
    grad: Option<&mut [f64]>,
) -> f64 {
    match (spec.loss, targets) {
        (Loss::CrossEntropy, Targets::Classes(labels)) => {
            let y = labels[s];
            if spec.binary_logit() {
                let z = logits[0];
                // log(1 + e^{-z}) for y = 1, log(1 + e^{z}) for y = 0
                let signed = if y == 1 { -z } else { z };
                let loss = signed.max(0.0) + (-signed.abs()).exp().ln_1p();
                if let Some(g) = grad {
                    g[0] = sigmoid(z) - y as f64;
                }
                loss
            } else {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let lse = max + sum.ln();
                if let Some(g) = grad {
                    for (k, gk) in g.iter_mut().enumerate() {
                        *gk = (logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 };
                    }
                }
                lse - logits[y]
            }
        }
        (Loss::Mse, Targets::Classes(labels)) => {
            let y = labels[s];
            let mut loss = 0.0;
            let mut g = grad;
            for (k, &z) in logits.iter().enumerate() {
                let diff = z - if k == y { 1.0 } else { 0.0 };
                loss += 0.5 * diff * diff;
                if let Some(g) = g.as_deref_mut() {
                    g[k] = diff;
                }
            }
            loss
        }
        (Loss::Mse, Targets::Real { values, width }) => {
            let t = &values[s * width..(s + 1) * width];
            let mut loss = 0.0;
            let mut g = grad;
            for (k, (&z, &tk)) in logits.iter().zip(t).enumerate() {
                let diff = z - tk;
                loss += 0.5 * diff * diff;
                if let Some(g) = g.as_deref_mut() {
                    g[k] = diff;
                }
            }
            loss
        }
        (Loss::CrossEntropy, Targets::Real { .. }) => unreachable!("rejected by Batch::check"),
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_loss(spec: &ModelSpec, params: &LayeredParams, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        let last = 2 * (spec.layer_dims().len() - 1);
        Err(Error::NumericOverflow {
            block: params.layout().name(last).to_string(),
        })
    }
}

/// Mean loss over the batch.
pub fn forward_loss(spec: &ModelSpec, params: &LayeredParams, batch: &Batch) -> Result<f64> {
    let trace = forward_trace(spec, params, batch)?;
    let logits = trace.outputs.last().unwrap();
    let width = spec.output_width();
    let total: f64 = (0..batch.len())
        .map(|s| {
            sample_loss(
                spec,
                &logits[s * width..(s + 1) * width],
                batch.targets(),
                s,
                None,
            )
        })
        .sum();
    check_loss(spec, params, total / batch.len() as f64)
}

/// Mean loss and its gradient with respect to every block.
pub fn loss_and_gradient(
    spec: &ModelSpec,
    params: &LayeredParams,
    batch: &Batch,
) -> Result<(f64, FlatStat)> {
    let trace = forward_trace(spec, params, batch)?;
    let dims = spec.layer_dims();
    let rows = batch.len();
    let scale = 1.0 / rows as f64;
    let width = spec.output_width();

    let logits = trace.outputs.last().unwrap();
    let mut delta = vec![0.0; rows * width];
    let mut total = 0.0;
    for s in 0..rows {
        let g = &mut delta[s * width..(s + 1) * width];
        total += sample_loss(
            spec,
            &logits[s * width..(s + 1) * width],
            batch.targets(),
            s,
            Some(g),
        );
        g.iter_mut().for_each(|v| *v *= scale);
    }
    let loss = check_loss(spec, params, total * scale)?;

    let mut grad = params.zeros_like();
    for i in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[i];
        let input = if i == 0 {
            batch.features()
        } else {
            &trace.outputs[i - 1]
        };
        {
            let range_w = params.layout().range(2 * i);
            let range_b = params.layout().range(2 * i + 1);
            let values = grad.values_mut();
            let (head, tail) = values.split_at_mut(range_b.start);
            let gw = &mut head[range_w];
            let gb = &mut tail[..range_b.len()];
            for s in 0..rows {
                let x = &input[s * fan_in..(s + 1) * fan_in];
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                for (o, &dz) in d.iter().enumerate() {
                    if dz == 0.0 {
                        continue;
                    }
                    gb[o] += dz;
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (r, &xi) in row.iter_mut().zip(x) {
                        *r += dz * xi;
                    }
                }
            }
        }
        if i == 0 {
            break;
        }
        let w = params.block(2 * i);
        let mut prev = vec![0.0; rows * fan_in];
        for s in 0..rows {
            let d = &delta[s * fan_out..(s + 1) * fan_out];
            let p = &mut prev[s * fan_in..(s + 1) * fan_in];
            for (o, &dz) in d.iter().enumerate() {
                if dz == 0.0 {
                    continue;
                }
                for (pi, &wi) in p.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *pi += dz * wi;
                }
            }
        }
        let act = &trace.outputs[i - 1];
        match spec.activation {
            Activation::Relu => {
                for (p, &a) in prev.iter_mut().zip(act) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (p, &a) in prev.iter_mut().zip(act) {
                    *p *= 1.0 - a * a;
                }
            }
        }
        delta = prev;
    }
    Ok((loss, grad))
}

/// Gradient of the mean batch loss.
pub fn backward(spec: &ModelSpec, params: &LayeredParams, batch: &Batch) -> Result<FlatStat> {
    loss_and_gradient(spec, params, batch).map(|(_, g)| g)
}

/// Exact mean gradient over every sample of a dataset.
pub fn full_gradient(
    spec: &ModelSpec,
    params: &LayeredParams,
    dataset: &Dataset,
) -> Result<FlatStat> {
    backward(spec, params, dataset.samples())
}

/// Predicted class per sample; ties go to the smallest index.
pub fn predict(spec: &ModelSpec, params: &LayeredParams, batch: &Batch) -> Result<Vec<usize>> {
    let trace = forward_trace(spec, params, batch)?;
    let logits = trace.outputs.last().unwrap();
    let width = spec.output_width();
    Ok(logits
        .chunks(width)
        .map(|row| {
            if spec.binary_logit() {
                usize::from(row[0] > 0.0)
            } else {
                argmax(row)
            }
        })
        .collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// `(accuracy, mean loss)`. Real-valued targets count a hit when the output
/// and target rows share their argmax.
pub fn evaluate(spec: &ModelSpec, params: &LayeredParams, dataset: &Dataset) -> Result<(f64, f64)> {
    let batch = dataset.samples();
    let predictions = predict(spec, params, batch)?;
    let hits = match batch.targets() {
        Targets::Classes(labels) => predictions
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count(),
        Targets::Real { values, width } => predictions
            .iter()
            .zip(values.chunks(*width))
            .filter(|(p, t)| **p == argmax(t))
            .count(),
    };
    let loss = forward_loss(spec, params, batch)?;
    Ok((hits as f64 / batch.len() as f64, loss))
}

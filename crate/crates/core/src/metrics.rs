//! Correlation and symmetry diagnostics. Everything here is computed in
//! 64-bit with in-order sums, independent of the network's precision.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{ForwardPass, Gradients, Network, NodeKind};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least two channels, got {0}")]
    TooFewChannels(usize),
    #[error("expected a [k,k,out,in] or [out,in] weight, got shape {0:?}")]
    BadWeightShape(Vec<usize>),
    #[error("empty input")]
    Empty,
    #[error("correlation {0} outside [-1, 1]")]
    OutOfRange(f64),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean over ordered pairs `i != j` of `<v_i, v_j> / (|v_i| |v_j|)`. A pair
/// with a zero vector counts as 1.
pub fn mean_pair_cosine(vectors: &[Vec<f64>]) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Err(MetricsError::TooFewChannels(n));
    }
    let sq: Vec<f64> = vectors.iter().map(|v| v.iter().map(|x| x * x).sum()).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let c = if sq[i] == 0.0 || sq[j] == 0.0 {
                1.0
            } else {
                let dot: f64 = vectors[i].iter().zip(&vectors[j]).map(|(a, b)| a * b).sum();
                (dot / (sq[i] * sq[j]).sqrt()).clamp(-1.0, 1.0)
            };
            total += c;
        }
    }
    Ok(2.0 * total / (n * (n - 1)) as f64)
}

fn weight_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    match w.shape() {
        [k, k2, o, i] if k == k2 => Ok((k * k2, *o, *i)),
        [o, i] => Ok((1, *o, *i)),
        s => Err(MetricsError::BadWeightShape(s.to_vec())),
    }
}

/// Per-output-channel sub-tensors `W[:, :, i, :]`.
pub fn output_filters(w: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (taps, o, i) = weight_dims(w)?;
    let d = w.data();
    Ok((0..o)
        .map(|r| {
            (0..taps)
                .flat_map(|t| d[(t * o + r) * i..(t * o + r + 1) * i].iter().copied())
                .collect()
        })
        .collect())
}

/// Per-input-channel sub-tensors `W[:, :, :, j]`.
pub fn input_filters(w: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (taps, o, i) = weight_dims(w)?;
    let d = w.data();
    Ok((0..i)
        .map(|s| (0..taps * o).map(|row| d[row * i + s]).collect())
        .collect())
}

pub fn forward_correlation(w: &Tensor) -> Result<f64> {
    mean_pair_cosine(&output_filters(w)?)
}

pub fn backward_correlation(w: &Tensor) -> Result<f64> {
    mean_pair_cosine(&input_filters(w)?)
}

/// Channel vectors of a channels-last tensor `[..., c]`.
pub fn channels(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let c = *t.shape().last().ok_or(MetricsError::Empty)?;
    let mut out = vec![Vec::with_capacity(t.len() / c.max(1)); c];
    for px in t.data().chunks(c) {
        for (ch, v) in out.iter_mut().zip(px) {
            ch.push(*v);
        }
    }
    Ok(out)
}

/// Mean pairwise channel correlation of a channels-last feature tensor.
/// Leading axes (batch and spatial) all index positions within a channel.
pub fn hidden_correlation(h: &Tensor) -> Result<f64> {
    mean_pair_cosine(&channels(h)?)
}

/// Same as [`hidden_correlation`], applied to a gradient tensor.
pub fn gradient_correlation(g: &Tensor) -> Result<f64> {
    mean_pair_cosine(&channels(g)?)
}

pub fn effective_width(c_f: f64, n: usize) -> f64 {
    1.0 + (n as f64 - 1.0) * (1.0 - c_f * c_f).max(0.0).sqrt()
}

pub fn mean_dissimilarity(per_layer_cf: &[f64]) -> Result<f64> {
    if per_layer_cf.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&c) = per_layer_cf.iter().find(|c| c.abs() > 1.0 + 1e-12) {
        return Err(MetricsError::OutOfRange(c));
    }
    Ok(per_layer_cf.iter().map(|c| (1.0 - c * c).max(0.0).sqrt()).sum::<f64>() / per_layer_cf.len() as f64)
}

/// `|P t|_F / |t|_F` where `P` removes the per-pixel channel mean. Zero for a
/// zero tensor.
pub fn perturbation_ratio(t: &Tensor) -> Result<f64> {
    let c = *t.shape().last().ok_or(MetricsError::Empty)?;
    if c < 2 {
        return Err(MetricsError::TooFewChannels(c));
    }
    let mut total = 0.0;
    let mut off = 0.0;
    for px in t.data().chunks(c) {
        let mean = px.iter().sum::<f64>() / c as f64;
        for v in px {
            total += v * v;
            off += (v - mean) * (v - mean);
        }
    }
    if total == 0.0 {
        return Ok(0.0);
    }
    Ok((off / total).sqrt().min(1.0))
}

/// `|t - reference|_F / |t|_F`: size of the deviation of `t` from an
/// unperturbed reference, relative to `t`. Zero for a zero tensor.
pub fn deviation_ratio(t: &Tensor, reference: &Tensor) -> Result<f64> {
    if t.shape() != reference.shape() {
        return Err(MetricsError::BadWeightShape(reference.shape().to_vec()));
    }
    let total: f64 = t.data().iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let dev: f64 = t
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((dev / total).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    /// Node id of the convolution or dense layer.
    pub layer: String,
    /// Width segment: increments whenever the layer output width changes.
    /// A heuristic grouping of layers, not a derived quantity.
    pub group: usize,
    pub c_f: Option<f64>,
    pub c_b: Option<f64>,
    pub c_h: Option<f64>,
    pub c_g: Option<f64>,
    pub effective_width: Option<f64>,
    pub fwd_perturbation_ratio: Option<f64>,
    pub grad_perturbation_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub step: u64,
    pub layers: Vec<LayerCorrelation>,
    pub mean_dissimilarity: Option<f64>,
}

/// Correlations of every convolution and dense layer: weights from the live
/// parameters, features from `pass` and feature gradients from `grads`.
pub fn correlation_report(net: &Network, pass: &ForwardPass, grads: Option<&Gradients>) -> CorrelationReport {
    let mut layers = Vec::new();
    let mut group = 0;
    let mut last_width = None;
    for node in net.nodes() {
        if !matches!(node.kind, NodeKind::Conv | NodeKind::Dense) {
            continue;
        }
        let w = &net.params()[node.weight.expect("weight layer")].value;
        let width = *node.out_shape.last().expect("output channels");
        if last_width.is_some_and(|lw| lw != width) {
            group += 1;
        }
        last_width = Some(width);
        let c_f = forward_correlation(w).ok();
        let out = pass.output(node.index);
        let g = grads.map(|g| &g.outputs[node.index]);
        layers.push(LayerCorrelation {
            layer: node.id.clone(),
            group,
            c_f,
            c_b: backward_correlation(w).ok(),
            c_h: hidden_correlation(out).ok(),
            c_g: g.and_then(|g| gradient_correlation(g).ok()),
            effective_width: c_f.map(|c| effective_width(c, width)),
            fwd_perturbation_ratio: perturbation_ratio(out).ok(),
            grad_perturbation_ratio: g.and_then(|g| perturbation_ratio(g).ok()),
        });
    }
    let cfs: Vec<f64> = layers.iter().filter_map(|l| l.c_f).collect();
    CorrelationReport {
        step: net.step(),
        mean_dissimilarity: mean_dissimilarity(&cfs).ok(),
        layers,
    }
}

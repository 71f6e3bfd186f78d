//! Checks of signal propagation at initialisation and of the tangent kernel.

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::arch::{augment_input, init_he, ArchConfig, LayerInit, Model};
use crate::nn::{softmax_cross_entropy, Mechanisms, Mode, Network, NodeKind};
use crate::tensor::{hash2, Precision, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub id: String,
    pub name: String,
    pub status: CheckStatus,
    /// Measured magnitude compared against `tolerance`.
    pub measured: Option<f64>,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl Check {
    fn skipped(id: &str, name: &str, reason: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            status: CheckStatus::Skipped(reason.into()),
            measured: None,
            tolerance: None,
            detail: String::new(),
        }
    }

    fn measured(id: &str, name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        let status = if measured <= tolerance {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        };
        Self {
            id: id.into(),
            name: name.into(),
            status,
            measured: Some(measured),
            tolerance: Some(tolerance),
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigpropTolerances {
    /// Largest channel spread allowed at a pixel.
    pub channel_symmetry: f64,
    /// Relative spread of the gradient Gram matrices within a width stage.
    pub gradient_gram: f64,
    pub zero_gradient: f64,
    /// Relative drift of norms and angles through the orthogonal stack.
    pub isometry: f64,
    pub negation: f64,
}

impl Default for SigpropTolerances {
    fn default() -> Self {
        Self {
            channel_symmetry: 0.0,
            gradient_gram: 1e-5,
            zero_gradient: 0.0,
            isometry: 1e-5,
            negation: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigpropReport {
    pub checks: Vec<Check>,
}

impl SigpropReport {
    pub fn get(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// No check failed (skipped checks do not count as passes or failures).
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }
}

/// `n` standard Gaussian inputs shaped for `model`, with labels cycling
/// through the classes. Delta-orthogonal stacks get `(x, 0)` inputs.
pub fn probe_batch(model: &Model, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    let mut shape = vec![n];
    shape.extend(&model.net.spec().input_shape);
    let augment = matches!(model.arch, ArchConfig::DeltaOrthogonal(_));
    if augment {
        *shape.last_mut().expect("input shape") /= 2;
    }
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(hash2(seed, 0x9b0e));
    let data: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut x = Tensor::new(&shape, data, model.net.precision())?;
    if augment {
        x = augment_input(&x)?;
    }
    let k = model.net.n_classes();
    Ok((x, (0..n).map(|i| i % k).collect()))
}

fn head_weight(net: &Network) -> Result<usize> {
    net.nodes()
        .iter()
        .rev()
        .find(|n| n.kind == NodeKind::Dense)
        .and_then(|n| n.weight)
        .ok_or_else(|| HarnessError::Precondition("network has no dense head".into()))
}

/// Largest `max_c - min_c` over pixels, per tap.
fn channel_spread(t: &Tensor) -> f64 {
    let c = *t.shape().last().expect("non-empty shape");
    t.data()
        .chunks(c)
        .map(|px| {
            let (lo, hi) = px
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Per-sample rows of a `[B, ...]` tensor.
fn rows(t: &Tensor) -> Vec<&[f64]> {
    let b = t.shape()[0];
    t.data().chunks(t.len() / b).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `G[i][j] = <t_i, t_j> / n` over samples of a batch.
fn gram(t: &Tensor, n: usize) -> Vec<f64> {
    let r = rows(t);
    let mut g = Vec::with_capacity(r.len() * r.len());
    for a in &r {
        for b in &r {
            g.push(dot(a, b) / n as f64);
        }
    }
    g
}

fn check_symmetry(model: &Model, out: &[Tensor], tol: f64) -> Check {
    const ID: &str = "a";
    const NAME: &str = "per-pixel channel symmetry";
    if !matches!(model.arch, ArchConfig::ConstNet(_) | ArchConfig::LeakyNet(_)) {
        return Check::skipped(ID, NAME, "only defined for ConstNet and LeakyNet");
    }
    let mut worst = 0.0f64;
    let mut broken = Vec::new();
    for tap in &model.taps {
        let s = channel_spread(&out[tap.node]);
        if s > tol {
            broken.push(tap.name.clone());
        }
        worst = worst.max(s);
    }
    let detail = if broken.is_empty() {
        format!("{} taps symmetric", model.taps.len())
    } else {
        format!("asymmetric at {}", broken.join(","))
    };
    Check::measured(ID, NAME, worst, tol, detail)
}

/// Gradients with respect to every node output for a fixed output direction.
fn probe_gradients(net: &Network, x: &Tensor, seed: u64) -> Result<Vec<Tensor>> {
    let mech = Mechanisms::deterministic();
    let pass = net.forward(x, Mode::Eval, &mech)?;
    let shape = pass.logits.shape().to_vec();
    let dir = init_he(&[shape[0], shape[1]], hash2(seed, 0xbe7a), net.precision())?;
    Ok(net.backward(&pass, &dir, &mech)?.outputs)
}

fn check_gradient_gram(model: &Model, x: &Tensor, tol: f64) -> Result<Check> {
    const ID: &str = "b";
    const NAME: &str = "gradient inner products constant across depth";
    let ArchConfig::ConstNet(cfg) = &model.arch else {
        return Ok(Check::skipped(ID, NAME, "only defined for ConstNet"));
    };
    // A zero head makes every gradient vanish; probe with a random one.
    let mut net = model.net.with_precision(Precision::Double);
    let head = head_weight(&net)?;
    let name = net.params()[head].name.clone();
    let shape = net.params()[head].value.shape().to_vec();
    net.set_param(&name, init_he(&shape, hash2(cfg.seed, 0x9ead), Precision::Double)?)?;
    let outputs = probe_gradients(&net, &x.to_precision(Precision::Double), cfg.seed)?;
    let nodes = net.nodes();
    let mut worst = 0.0f64;
    let mut stages = 0;
    let mut reference: Option<(usize, Vec<f64>)> = None;
    // Taps after the stem are block outputs; widening blocks start a new stage.
    for tap in model.taps.iter().skip(1) {
        let width = *nodes[tap.node].out_shape.last().expect("channels");
        let g = gram(&outputs[tap.node], width);
        match &reference {
            Some((w, r)) if *w == width && nodes[tap.node].kind == NodeKind::SkipAdd => {
                let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
                let d = g.iter().zip(r).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
                worst = worst.max(d);
            }
            _ => {
                stages += 1;
                reference = Some((width, g));
            }
        }
    }
    Ok(Check::measured(
        ID,
        NAME,
        worst,
        tol,
        format!("{stages} constant-width stages compared with a random probe head"),
    ))
}

fn check_zero_gradients(model: &Model, x: &Tensor, labels: &[usize], tol: f64) -> Result<Check> {
    const ID: &str = "c";
    const NAME: &str = "hidden gradients vanish under a zero head";
    let net = &model.net;
    let head = head_weight(net)?;
    if net.params()[head].value.max_abs() != 0.0 {
        return Ok(Check::skipped(ID, NAME, "final layer is not zero"));
    }
    let mech = Mechanisms::deterministic();
    let pass = net.forward(x, Mode::Train, &mech)?;
    let (_, dl) = softmax_cross_entropy(&pass.logits, labels)?;
    let grads = net.backward(&pass, &dl, &mech)?;
    let head_node = net.params()[head].node;
    let worst = net
        .nodes()
        .iter()
        .filter(|n| n.index < head_node)
        .map(|n| grads.outputs[n.index].max_abs())
        .fold(0.0, f64::max);
    Ok(Check::measured(
        ID,
        NAME,
        worst,
        tol,
        "largest gradient below the head".into(),
    ))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a) * dot(b, b)).sqrt()
}

fn check_isometry(model: &Model, out: &[Tensor], tol: f64) -> Check {
    const ID: &str = "d";
    const NAME: &str = "delta-orthogonal norm and angle preservation";
    if !matches!(model.arch, ArchConfig::DeltaOrthogonal(_)) {
        return Check::skipped(ID, NAME, "only defined for delta-orthogonal stacks");
    }
    let first = rows(&out[model.taps[0].node])
        .iter()
        .map(|r| r.to_vec())
        .collect::<Vec<_>>();
    let mut worst = 0.0f64;
    for tap in &model.taps[1..] {
        let r = rows(&out[tap.node]);
        for (i, ri) in r.iter().enumerate() {
            let n0 = dot(&first[i], &first[i]).sqrt();
            worst = worst.max((dot(ri, ri).sqrt() - n0).abs() / n0);
            for j in i + 1..r.len() {
                worst = worst.max((cosine(ri, r[j]) - cosine(&first[i], &first[j])).abs());
            }
        }
    }
    Check::measured(
        ID,
        NAME,
        worst,
        tol,
        format!("relative norm drift and cosine drift over {} layers", model.taps.len()),
    )
}

fn check_negation(model: &Model, out: &[Tensor], tol: f64) -> Check {
    const ID: &str = "e";
    const NAME: &str = "LeakyNet pairwise negation";
    let ArchConfig::LeakyNet(cfg) = &model.arch else {
        return Check::skipped(ID, NAME, "only defined for LeakyNet");
    };
    if !cfg.widen_positions.is_empty() {
        return Check::skipped(ID, NAME, "widening changes feature shapes");
    }
    if cfg.per_layer_init.iter().any(|l| matches!(l, LayerInit::He)) {
        return Check::skipped(ID, NAME, "He layers do not preserve symmetric features");
    }
    let a0 = &out[model.taps[0].node];
    let mut worst = 0.0f64;
    let mut compared = 0;
    for (k, tap) in model.taps.iter().enumerate().skip(1) {
        let sign = match k % 4 {
            0 => 1.0,
            2 => -1.0,
            _ => continue,
        };
        let ak = &out[tap.node];
        let d = ak
            .data()
            .iter()
            .zip(a0.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - sign * b).abs()));
        worst = worst.max(d);
        compared += 1;
    }
    Check::measured(
        ID,
        NAME,
        worst,
        tol,
        format!("{compared} even layers compared with the stem output"),
    )
}

/// Run every signal-propagation check that applies to `model`.
pub fn verify_sigprop(model: &Model, x: &Tensor, labels: &[usize], tol: &SigpropTolerances) -> Result<SigpropReport> {
    let pass = model.net.forward(x, Mode::Eval, &Mechanisms::deterministic())?;
    let outputs: Vec<Tensor> = (0..model.net.nodes().len()).map(|i| pass.output(i).clone()).collect();
    Ok(SigpropReport {
        checks: vec![
            check_symmetry(model, &outputs, tol.channel_symmetry),
            check_gradient_gram(model, x, tol.gradient_gram)?,
            check_zero_gradients(model, x, labels, tol.zero_gradient)?,
            check_isometry(model, &outputs, tol.isometry),
            check_negation(model, &outputs, tol.negation),
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NtkReport {
    /// Largest `|theta - reference| / reference` over same-class entries.
    pub max_relative_deviation: f64,
    /// Largest `|theta|` over entries with different classes.
    pub max_off_diagonal: f64,
    /// `theta[(a * K + i) * m * K + b * K + j]` for samples `a, b` and classes `i, j`.
    pub kernel: Vec<f64>,
    pub reference: Vec<f64>,
    pub samples: usize,
    pub classes: usize,
}

/// Mean over the strided output grid of the channel-averaged input: the
/// value every channel holds after average pooling in a zero-initialised
/// ConstNet without batch norm.
pub fn pooled_input_mean(x: &[f64], h: usize, w: usize, c: usize, total_stride: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0;
    for y in (0..h).step_by(total_stride) {
        for xx in (0..w).step_by(total_stride) {
            let px = &x[(y * w + xx) * c..(y * w + xx + 1) * c];
            acc += px.iter().sum::<f64>() / c as f64;
            n += 1;
        }
    }
    acc / n as f64
}

/// Empirical tangent kernel of a zero-initialised ConstNet against the
/// linear-model kernel `delta_ij (<s(x), s(x')> + 1)`, where `s(x)` is the
/// pooled feature vector predicted from the input alone.
pub fn verify_ntk(model: &Model, x: &Tensor) -> Result<NtkReport> {
    let ArchConfig::ConstNet(cfg) = &model.arch else {
        return Err(HarnessError::Precondition("NTK check needs a ConstNet".into()));
    };
    if cfg.use_batchnorm {
        return Err(HarnessError::Precondition(
            "NTK check needs a ConstNet without batch norm".into(),
        ));
    }
    let net = model.net.with_precision(Precision::Double);
    let head = head_weight(&net)?;
    if net.params()[head].value.max_abs() != 0.0 {
        return Err(HarnessError::Precondition("NTK check needs a zero final layer".into()));
    }
    let m = x.shape()[0];
    if m == 0 || m > 8 {
        return Err(HarnessError::Precondition(format!(
            "NTK check takes 1 to 8 inputs, got {m}"
        )));
    }
    let k = net.n_classes();
    let x = x.to_precision(Precision::Double);
    let mech = Mechanisms::deterministic();
    // Jacobian rows: one per (sample, class), flattened over all parameters.
    let mut jac: Vec<Vec<f64>> = Vec::with_capacity(m * k);
    let sample_shape = x.shape()[1..].to_vec();
    let per: usize = sample_shape.iter().product();
    for a in 0..m {
        let mut shape = vec![1];
        shape.extend(&sample_shape);
        let xa = Tensor::new(&shape, x.data()[a * per..(a + 1) * per].to_vec(), Precision::Double)?;
        let pass = net.forward(&xa, Mode::Eval, &mech)?;
        for i in 0..k {
            let mut e = Tensor::zeros(&[1, k], Precision::Double);
            e.set(&[0, i], 1.0);
            let g = net.backward(&pass, &e, &mech)?;
            jac.push(g.params.iter().flat_map(|p| p.data().iter().copied()).collect());
        }
    }
    let (h, w, c) = (cfg.input_shape[0], cfg.input_shape[1], cfg.input_shape[2]);
    let total_stride = cfg.stride.pow(cfg.widen_positions.len() as u32);
    let width = cfg.base_width * total_stride;
    let s: Vec<f64> = (0..m)
        .map(|a| pooled_input_mean(&x.data()[a * per..(a + 1) * per], h, w, c, total_stride))
        .collect();
    let n = m * k;
    let mut kernel = vec![0.0; n * n];
    let mut reference = vec![0.0; n * n];
    let mut max_rel = 0.0f64;
    let mut max_off = 0.0f64;
    for a in 0..m {
        for i in 0..k {
            for b in 0..m {
                for j in 0..k {
                    let (r, col) = (a * k + i, b * k + j);
                    let theta = dot(&jac[r], &jac[col]);
                    kernel[r * n + col] = theta;
                    if i == j {
                        let want = width as f64 * s[a] * s[b] + 1.0;
                        reference[r * n + col] = want;
                        max_rel = max_rel.max((theta - want).abs() / want.abs());
                    } else {
                        max_off = max_off.max(theta.abs());
                    }
                }
            }
        }
    }
    Ok(NtkReport {
        max_relative_deviation: max_rel,
        max_off_diagonal: max_off,
        kernel,
        reference,
        samples: m,
        classes: k,
    })
}

use serde::{Deserialize, Serialize};

use super::dropout::dropout_mask;
use super::spec::{LayerSpec, NetworkSpec};
use super::{NnError, Result};
use crate::tensor::{
    conv2d_batch, conv2d_grad_input, conv2d_grad_weight, matmul, Boundary, Precision, ReductionMode, ReductionPolicy,
    Tensor,
};

const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Sources of asymmetry applied during a training pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mechanisms {
    pub reduction: ReductionMode,
    pub dropout_rate: f64,
    pub dropout_on_first_layer: bool,
    /// Seed for dropout masks.
    pub seed: u64,
}

impl Default for Mechanisms {
    fn default() -> Self {
        Self::deterministic()
    }
}

impl Mechanisms {
    pub fn deterministic() -> Self {
        Self {
            reduction: ReductionMode::Ordered,
            dropout_rate: 0.0,
            dropout_on_first_layer: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    /// Index of the owning node.
    pub node: usize,
    pub value: Tensor,
    pub velocity: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DropSite {
    Never,
    First,
    Regular,
}

#[derive(Clone, Debug)]
enum Op {
    Dense {
        w: usize,
        drop: DropSite,
    },
    Conv {
        w: usize,
        stride: usize,
        boundary: Boundary,
        drop: DropSite,
    },
    Bias {
        b: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        eps: f64,
        stat: usize,
    },
    AvgPoolAll,
    Flatten,
    SkipAdd {
        block: Vec<usize>,
    },
    Widen {
        shortcut: usize,
        block: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    id: String,
    op: Op,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// Kind of a node, for callers that walk the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Dense,
    Conv,
    Bias,
    Relu,
    LeakyRelu,
    BatchNorm,
    AvgPoolAll,
    Flatten,
    SkipAdd,
    WideningHead,
}

#[derive(Clone, Debug)]
pub struct NodeInfo {
    pub index: usize,
    pub id: String,
    pub kind: NodeKind,
    /// Per-sample output shape.
    pub out_shape: Vec<usize>,
    /// Weight parameter index for dense and conv nodes.
    pub weight: Option<usize>,
    /// True for the main sequence (not nested inside a block).
    pub top_level: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    precision: Precision,
    nodes: Vec<Node>,
    root: Vec<usize>,
    params: Vec<Param>,
    bn: Vec<BnRunning>,
    step: u64,
}

#[derive(Clone, Debug)]
enum Cache {
    None,
    /// Masked input actually fed to the layer and the mask scale per element.
    Dropped {
        input: Tensor,
        mask: Vec<f64>,
    },
    Bn {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
}

/// Everything recorded by a forward pass that backward needs.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    step: u64,
    mode: Mode,
    inputs: Vec<Option<Tensor>>,
    outputs: Vec<Option<Tensor>>,
    caches: Vec<Cache>,
    bn_batch: Vec<Option<BnRunning>>,
    pub logits: Tensor,
}

impl ForwardPass {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Output of node `index`.
    pub fn output(&self, index: usize) -> &Tensor {
        self.outputs[index].as_ref().expect("every node runs once")
    }

    pub fn input(&self, index: usize) -> &Tensor {
        self.inputs[index].as_ref().expect("every node runs once")
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    /// Aligned with [`Network::params`].
    pub params: Vec<Tensor>,
    /// Gradient of the loss with respect to each node's output.
    pub outputs: Vec<Tensor>,
    /// Gradient with respect to the network input.
    pub input: Tensor,
}

struct Builder {
    precision: Precision,
    nodes: Vec<Node>,
    params: Vec<Param>,
    bn: Vec<BnRunning>,
    seen_drop_site: bool,
}

fn shape_err(id: &str, msg: String) -> NnError {
    NnError::Shape(format!("layer {id}: {msg}"))
}

impl Builder {
    fn add_param(&mut self, name: String, role: ParamRole, node: usize, shape: &[usize]) -> usize {
        let value = Tensor::zeros(shape, self.precision);
        self.params.push(Param {
            name,
            role,
            node,
            velocity: value.clone(),
            value,
        });
        self.params.len() - 1
    }

    fn drop_site(&mut self) -> DropSite {
        if self.seen_drop_site {
            DropSite::Regular
        } else {
            self.seen_drop_site = true;
            DropSite::First
        }
    }

    fn seq(&mut self, layers: &[LayerSpec], prefix: &str, mut shape: Vec<usize>) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut ids = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            let id = if prefix.is_empty() {
                format!("{i}")
            } else {
                format!("{prefix}.{i}")
            };
            let idx = self.layer(layer, id, shape.clone(), true)?;
            shape = self.nodes[idx].out_shape.clone();
            ids.push(idx);
        }
        Ok((ids, shape))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_out(
        &self,
        id: &str,
        shape: &[usize],
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        boundary: Boundary,
    ) -> Result<Vec<usize>> {
        if shape.len() != 3 || shape[2] != c_in {
            return Err(shape_err(id, format!("conv expects [H,W,{c_in}], got {shape:?}")));
        }
        if k.is_multiple_of(2) || stride == 0 {
            return Err(shape_err(id, format!("invalid kernel {k} or stride {stride}")));
        }
        let out = |n: usize| -> Result<usize> {
            match boundary {
                Boundary::Periodic if !n.is_multiple_of(stride) => {
                    Err(shape_err(id, format!("periodic stride {stride} does not divide {n}")))
                }
                Boundary::Periodic => Ok(n / stride),
                Boundary::Zero => Ok(n.div_ceil(stride)),
            }
        };
        Ok(vec![out(shape[0])?, out(shape[1])?, c_out])
    }

    fn layer(&mut self, layer: &LayerSpec, id: String, shape: Vec<usize>, droppable: bool) -> Result<usize> {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            id: id.clone(),
            op: Op::Relu,
            in_shape: shape.clone(),
            out_shape: shape.clone(),
        });
        let (op, out_shape) = match layer {
            LayerSpec::Dense { n_in, n_out } => {
                if shape != [*n_in] {
                    return Err(shape_err(&id, format!("dense expects [{n_in}], got {shape:?}")));
                }
                let w = self.add_param(format!("{id}.weight"), ParamRole::Weight, idx, &[*n_out, *n_in]);
                let drop = if droppable { self.drop_site() } else { DropSite::Never };
                (Op::Dense { w, drop }, vec![*n_out])
            }
            LayerSpec::Conv {
                k,
                c_in,
                c_out,
                stride,
                boundary,
            } => {
                let out = self.conv_out(&id, &shape, *k, *c_in, *c_out, *stride, *boundary)?;
                let w = self.add_param(format!("{id}.weight"), ParamRole::Weight, idx, &[*k, *k, *c_out, *c_in]);
                let drop = if droppable { self.drop_site() } else { DropSite::Never };
                (
                    Op::Conv {
                        w,
                        stride: *stride,
                        boundary: *boundary,
                        drop,
                    },
                    out,
                )
            }
            LayerSpec::Bias { channels } => {
                if shape.last() != Some(channels) {
                    return Err(shape_err(&id, format!("bias over {channels} channels, got {shape:?}")));
                }
                let b = self.add_param(format!("{id}.bias"), ParamRole::Bias, idx, &[*channels]);
                (Op::Bias { b }, shape.clone())
            }
            LayerSpec::Relu => (Op::Relu, shape.clone()),
            LayerSpec::LeakyRelu { slope } => (Op::LeakyRelu { slope: *slope }, shape.clone()),
            LayerSpec::BatchNorm { channels, eps } => {
                if shape.last() != Some(channels) {
                    return Err(shape_err(
                        &id,
                        format!("batchnorm over {channels} channels, got {shape:?}"),
                    ));
                }
                let gamma = self.add_param(format!("{id}.gamma"), ParamRole::BnScale, idx, &[*channels]);
                self.params[gamma].value = Tensor::full(&[*channels], 1.0, self.precision);
                let beta = self.add_param(format!("{id}.beta"), ParamRole::BnShift, idx, &[*channels]);
                self.bn.push(BnRunning {
                    mean: vec![0.0; *channels],
                    var: vec![1.0; *channels],
                });
                let stat = self.bn.len() - 1;
                (
                    Op::BatchNorm {
                        gamma,
                        beta,
                        eps: *eps,
                        stat,
                    },
                    shape.clone(),
                )
            }
            LayerSpec::AvgPoolAll => {
                if shape.len() != 3 {
                    return Err(shape_err(&id, format!("pooling expects [H,W,C], got {shape:?}")));
                }
                (Op::AvgPoolAll, vec![shape[2]])
            }
            LayerSpec::Flatten => (Op::Flatten, vec![shape.iter().product()]),
            LayerSpec::SkipAdd { block } => {
                let (ids, out) = self.seq(block, &id, shape.clone())?;
                if out != shape {
                    return Err(shape_err(&id, format!("skip block maps {shape:?} to {out:?}")));
                }
                (Op::SkipAdd { block: ids }, shape.clone())
            }
            LayerSpec::WideningHead {
                c_in,
                stride,
                factor,
                boundary,
                block,
            } => {
                let sc_spec = LayerSpec::Conv {
                    k: 1,
                    c_in: *c_in,
                    c_out: c_in * factor,
                    stride: *stride,
                    boundary: *boundary,
                };
                let shortcut = self.layer(&sc_spec, format!("{id}.s"), shape.clone(), false)?;
                let sc_out = self.nodes[shortcut].out_shape.clone();
                let (ids, out) = self.seq(block, &id, shape.clone())?;
                if out != sc_out {
                    return Err(shape_err(&id, format!("block output {out:?} vs shortcut {sc_out:?}")));
                }
                (Op::Widen { shortcut, block: ids }, sc_out)
            }
        };
        self.nodes[idx].op = op;
        self.nodes[idx].out_shape = out_shape;
        Ok(idx)
    }
}

fn with_batch(batch: usize, shape: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(shape);
    s
}

impl Network {
    /// Build a network with all weights zero and batch-norm scales one.
    pub fn new(spec: NetworkSpec, precision: Precision) -> Result<Self> {
        let mut b = Builder {
            precision,
            nodes: Vec::new(),
            params: Vec::new(),
            bn: Vec::new(),
            seen_drop_site: false,
        };
        let (root, out) = b.seq(&spec.layers, "", spec.input_shape.clone())?;
        if out.len() != 1 {
            return Err(NnError::Shape(format!(
                "network output must be [n_classes], got {out:?}"
            )));
        }
        Ok(Self {
            spec,
            precision,
            nodes: b.nodes,
            root,
            params: b.params,
            bn: b.bn,
            step: 0,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Convert parameters and state to another precision.
    pub fn with_precision(&self, precision: Precision) -> Self {
        let mut n = self.clone();
        n.precision = precision;
        for p in &mut n.params {
            p.value = p.value.to_precision(precision);
            p.velocity = p.velocity.to_precision(precision);
        }
        n
    }

    pub fn n_classes(&self) -> usize {
        self.nodes[*self.root.last().expect("non-empty network")].out_shape[0]
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.params[self.param_index(name)?].value)
    }

    /// Replace a parameter's value; the shape must match.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.param_index(name)?;
        if value.shape() != self.params[i].value.shape() {
            return Err(NnError::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value.to_precision(self.precision);
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn advance_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn bn_running(&self) -> &[BnRunning] {
        &self.bn
    }

    pub(crate) fn bn_running_mut(&mut self) -> &mut [BnRunning] {
        &mut self.bn
    }

    /// Every node in pre-order.
    pub fn nodes(&self) -> Vec<NodeInfo> {
        let mut top = vec![false; self.nodes.len()];
        for &r in &self.root {
            top[r] = true;
        }
        self.nodes
            .iter()
            .enumerate()
            .map(|(index, n)| {
                let (kind, weight) = match &n.op {
                    Op::Dense { w, .. } => (NodeKind::Dense, Some(*w)),
                    Op::Conv { w, .. } => (NodeKind::Conv, Some(*w)),
                    Op::Bias { .. } => (NodeKind::Bias, None),
                    Op::Relu => (NodeKind::Relu, None),
                    Op::LeakyRelu { .. } => (NodeKind::LeakyRelu, None),
                    Op::BatchNorm { .. } => (NodeKind::BatchNorm, None),
                    Op::AvgPoolAll => (NodeKind::AvgPoolAll, None),
                    Op::Flatten => (NodeKind::Flatten, None),
                    Op::SkipAdd { .. } => (NodeKind::SkipAdd, None),
                    Op::Widen { .. } => (NodeKind::WideningHead, None),
                };
                NodeInfo {
                    index,
                    id: n.id.clone(),
                    kind,
                    out_shape: n.out_shape.clone(),
                    weight,
                    top_level: top[index],
                }
            })
            .collect()
    }

    /// Node indices of the top-level sequence.
    pub fn top_level(&self) -> &[usize] {
        &self.root
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    fn policy(&self, mech: &Mechanisms, node: usize, pass: u64) -> ReductionPolicy {
        ReductionPolicy::new(mech.reduction, self.precision)
            .keyed(self.step)
            .keyed(node as u64)
            .keyed(pass)
    }

    /// Forward pass. Never mutates the network; batch-norm statistics from a
    /// training pass are folded in by [`Network::absorb_batch_stats`].
    pub fn forward(&self, batch: &Tensor, mode: Mode, mech: &Mechanisms) -> Result<ForwardPass> {
        let expect = with_batch(batch.shape().first().copied().unwrap_or(0), &self.spec.input_shape);
        if batch.shape() != expect.as_slice() || batch.shape()[0] == 0 {
            return Err(NnError::Shape(format!(
                "input batch {:?} does not match network input {:?}",
                batch.shape(),
                self.spec.input_shape
            )));
        }
        if !(0.0..1.0).contains(&mech.dropout_rate) {
            return Err(NnError::InvalidRate(mech.dropout_rate));
        }
        let n = self.nodes.len();
        let mut pass = ForwardPass {
            step: self.step,
            mode,
            inputs: vec![None; n],
            outputs: vec![None; n],
            caches: vec![Cache::None; n],
            bn_batch: vec![None; self.bn.len()],
            logits: Tensor::zeros(&[0], self.precision),
        };
        let x = batch.to_precision(self.precision);
        pass.logits = self.run_seq(&self.root, x, mode, mech, &mut pass)?;
        Ok(pass)
    }

    fn run_seq(
        &self,
        seq: &[usize],
        mut x: Tensor,
        mode: Mode,
        mech: &Mechanisms,
        pass: &mut ForwardPass,
    ) -> Result<Tensor> {
        for &i in seq {
            x = self.run_node(i, x, mode, mech, pass)?;
        }
        Ok(x)
    }

    fn maybe_drop(
        &self,
        i: usize,
        drop: DropSite,
        x: &Tensor,
        mode: Mode,
        mech: &Mechanisms,
    ) -> Option<(Tensor, Vec<f64>)> {
        let active = mode == Mode::Train
            && mech.dropout_rate > 0.0
            && match drop {
                DropSite::Never => false,
                DropSite::First => mech.dropout_on_first_layer,
                DropSite::Regular => true,
            };
        if !active {
            return None;
        }
        let mask = dropout_mask(x.len(), mech.dropout_rate, mech.seed, self.step, i as u64);
        let p = self.precision;
        let mut y = x.clone();
        for (v, m) in y.data_mut().iter_mut().zip(&mask) {
            *v = p.round(*v * m);
        }
        Some((y, mask))
    }

    fn run_node(&self, i: usize, x: Tensor, mode: Mode, mech: &Mechanisms, pass: &mut ForwardPass) -> Result<Tensor> {
        let node = &self.nodes[i];
        let p = self.precision;
        let bsz = x.shape()[0];
        let mut cache = Cache::None;
        let y = match &node.op {
            Op::Dense { w, drop } => {
                let dropped = self.maybe_drop(i, *drop, &x, mode, mech);
                let xin = dropped.as_ref().map(|d| &d.0).unwrap_or(&x);
                let wt = self.params[*w].value.transpose2()?;
                let y = matmul(xin, &wt, &self.policy(mech, i, 0))?;
                if let Some((input, mask)) = dropped {
                    cache = Cache::Dropped { input, mask };
                }
                y
            }
            Op::Conv {
                w,
                stride,
                boundary,
                drop,
            } => {
                let dropped = self.maybe_drop(i, *drop, &x, mode, mech);
                let xin = dropped.as_ref().map(|d| &d.0).unwrap_or(&x);
                let y = conv2d_batch(
                    xin,
                    &self.params[*w].value,
                    *stride,
                    *boundary,
                    &self.policy(mech, i, 0),
                )?;
                if let Some((input, mask)) = dropped {
                    cache = Cache::Dropped { input, mask };
                }
                y
            }
            Op::Bias { b } => {
                let bias = self.params[*b].value.data();
                let c = bias.len();
                let mut y = x.clone();
                for (j, v) in y.data_mut().iter_mut().enumerate() {
                    *v = p.round(*v + bias[j % c]);
                }
                y
            }
            Op::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
                y
            }
            Op::LeakyRelu { slope } => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    if *v <= 0.0 {
                        *v = p.round(*v * slope);
                    }
                }
                y
            }
            Op::BatchNorm { gamma, beta, eps, stat } => {
                let c = *node.in_shape.last().expect("channels");
                let g = self.params[*gamma].value.data();
                let bt = self.params[*beta].value.data();
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        let (m, v) = channel_moments(x.data(), c);
                        pass.bn_batch[*stat] = Some(BnRunning {
                            mean: m.clone(),
                            var: v.clone(),
                        });
                        (m, v, true)
                    }
                    Mode::Eval => (self.bn[*stat].mean.clone(), self.bn[*stat].var.clone(), false),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                let mut y = x.clone();
                for (j, v) in y.data_mut().iter_mut().enumerate() {
                    let ch = j % c;
                    xhat[j] = (x.data()[j] - mean[ch]) * inv_std[ch];
                    *v = p.round(g[ch] * xhat[j] + bt[ch]);
                }
                cache = Cache::Bn {
                    xhat,
                    inv_std,
                    batch: batch_stats,
                };
                y
            }
            Op::AvgPoolAll => {
                let (h, w, c) = (node.in_shape[0], node.in_shape[1], node.in_shape[2]);
                let hw = h * w;
                let mut out = vec![0.0; bsz * c];
                for b in 0..bsz {
                    for s in 0..hw {
                        let row = &x.data()[(b * hw + s) * c..(b * hw + s + 1) * c];
                        for (o, v) in out[b * c..(b + 1) * c].iter_mut().zip(row) {
                            *o = p.round(*o + v);
                        }
                    }
                }
                for v in &mut out {
                    *v = p.round(*v / hw as f64);
                }
                Tensor::new(&[bsz, c], out, p)?
            }
            Op::Flatten => x.reshape(&with_batch(bsz, &node.out_shape))?,
            Op::SkipAdd { block } => {
                let r = self.run_seq(block, x.clone(), mode, mech, pass)?;
                x.add(&r)?
            }
            Op::Widen { shortcut, block } => {
                let s = self.run_node(*shortcut, x.clone(), mode, mech, pass)?;
                let r = self.run_seq(block, x.clone(), mode, mech, pass)?;
                s.add(&r)?
            }
        };
        pass.caches[i] = cache;
        pass.inputs[i] = Some(x);
        pass.outputs[i] = Some(y.clone());
        Ok(y)
    }

    /// Fold batch-norm statistics from a training pass into the running estimates.
    pub fn absorb_batch_stats(&mut self, pass: &ForwardPass) {
        for (run, batch) in self.bn.iter_mut().zip(&pass.bn_batch) {
            if let Some(b) = batch {
                for (r, v) in run.mean.iter_mut().zip(&b.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
                for (r, v) in run.var.iter_mut().zip(&b.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
    }

    /// Backward pass from the gradient of the loss with respect to the logits.
    pub fn backward(&self, pass: &ForwardPass, loss_grad: &Tensor, mech: &Mechanisms) -> Result<Gradients> {
        if pass.step != self.step {
            return Err(NnError::StaleActivations {
                pass: pass.step,
                network: self.step,
            });
        }
        if loss_grad.shape() != pass.logits.shape() {
            return Err(NnError::Shape(format!(
                "loss gradient {:?} vs logits {:?}",
                loss_grad.shape(),
                pass.logits.shape()
            )));
        }
        let mut grads = Gradients {
            params: self
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape(), self.precision))
                .collect(),
            outputs: vec![Tensor::zeros(&[0], self.precision); self.nodes.len()],
            input: Tensor::zeros(&[0], self.precision),
        };
        let g = loss_grad.to_precision(self.precision);
        grads.input = self.back_seq(&self.root, g, pass, mech, &mut grads)?;
        Ok(grads)
    }

    fn back_seq(
        &self,
        seq: &[usize],
        mut g: Tensor,
        pass: &ForwardPass,
        mech: &Mechanisms,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        for &i in seq.iter().rev() {
            g = self.back_node(i, g, pass, mech, grads)?;
        }
        Ok(g)
    }

    fn back_node(
        &self,
        i: usize,
        g: Tensor,
        pass: &ForwardPass,
        mech: &Mechanisms,
        grads: &mut Gradients,
    ) -> Result<Tensor> {
        let node = &self.nodes[i];
        let p = self.precision;
        let x = pass.input(i);
        let dx = match &node.op {
            Op::Dense { w, .. } => {
                let xin = match &pass.caches[i] {
                    Cache::Dropped { input, .. } => input,
                    _ => x,
                };
                let wv = &self.params[*w].value;
                let gt = g.transpose2()?;
                grads.params[*w] = matmul(&gt, xin, &self.policy(mech, i, 2))?;
                let dx = matmul(&g, wv, &self.policy(mech, i, 1))?;
                undrop(dx, &pass.caches[i], p)
            }
            Op::Conv {
                w, stride, boundary, ..
            } => {
                let xin = match &pass.caches[i] {
                    Cache::Dropped { input, .. } => input,
                    _ => x,
                };
                let wv = &self.params[*w].value;
                grads.params[*w] =
                    conv2d_grad_weight(xin, wv.shape(), &g, *stride, *boundary, &self.policy(mech, i, 2))?;
                let dx = conv2d_grad_input(x.shape(), wv, &g, *stride, *boundary, &self.policy(mech, i, 1))?;
                undrop(dx, &pass.caches[i], p)
            }
            Op::Bias { b } => {
                let c = self.params[*b].value.len();
                let policy = self.policy(mech, i, 2);
                let rows = g.len() / c;
                let mut db = vec![0.0; c];
                let mut terms = vec![0.0; rows];
                for (ch, d) in db.iter_mut().enumerate() {
                    for (r, t) in terms.iter_mut().enumerate() {
                        *t = g.data()[r * c + ch];
                    }
                    *d = policy.sum_terms(&mut terms, ch as u64);
                }
                grads.params[*b] = Tensor::new(&[c], db, p)?;
                g.clone()
            }
            Op::Relu => {
                let mut d = g.clone();
                for (v, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *v = 0.0;
                    }
                }
                d
            }
            Op::LeakyRelu { slope } => {
                let mut d = g.clone();
                for (v, xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *v = p.round(*v * slope);
                    }
                }
                d
            }
            Op::BatchNorm { gamma, beta, .. } => {
                let Cache::Bn { xhat, inv_std, batch } = &pass.caches[i] else {
                    unreachable!("batchnorm cache")
                };
                let c = inv_std.len();
                let gd = g.data();
                let gam = self.params[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (j, &gv) in gd.iter().enumerate() {
                    dbeta[j % c] += gv;
                    dgamma[j % c] += gv * xhat[j];
                }
                let m = (gd.len() / c) as f64;
                let mut dx = vec![0.0; gd.len()];
                for (j, d) in dx.iter_mut().enumerate() {
                    let ch = j % c;
                    *d = if *batch {
                        gam[ch] * inv_std[ch] * (gd[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                    } else {
                        gam[ch] * inv_std[ch] * gd[j]
                    };
                }
                grads.params[*gamma] = Tensor::new(&[c], dgamma, p)?;
                grads.params[*beta] = Tensor::new(&[c], dbeta, p)?;
                Tensor::new(x.shape(), dx, p)?
            }
            Op::AvgPoolAll => {
                let (h, w, c) = (node.in_shape[0], node.in_shape[1], node.in_shape[2]);
                let hw = h * w;
                let bsz = x.shape()[0];
                let mut dx = vec![0.0; x.len()];
                for b in 0..bsz {
                    for ch in 0..c {
                        let v = p.round(g.data()[b * c + ch] / hw as f64);
                        for s in 0..hw {
                            dx[(b * hw + s) * c + ch] = v;
                        }
                    }
                }
                Tensor::new(x.shape(), dx, p)?
            }
            Op::Flatten => g.reshape(x.shape())?,
            Op::SkipAdd { block } => {
                let r = self.back_seq(block, g.clone(), pass, mech, grads)?;
                g.add(&r)?
            }
            Op::Widen { shortcut, block } => {
                let s = self.back_node(*shortcut, g.clone(), pass, mech, grads)?;
                let r = self.back_seq(block, g.clone(), pass, mech, grads)?;
                s.add(&r)?
            }
        };
        grads.outputs[i] = g;
        Ok(dx)
    }
}

fn undrop(mut dx: Tensor, cache: &Cache, p: Precision) -> Tensor {
    if let Cache::Dropped { mask, .. } = cache {
        for (v, m) in dx.data_mut().iter_mut().zip(mask) {
            *v = p.round(*v * m);
        }
    }
    dx
}

/// Biased per-channel mean and variance over all leading axes.
fn channel_moments(data: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (data.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for (j, v) in data.iter().enumerate() {
        mean[j % c] += v;
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![0.0; c];
    for (j, v) in data.iter().enumerate() {
        let d = v - mean[j % c];
        var[j % c] += d * d;
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

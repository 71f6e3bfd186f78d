//! Network constructors and weight initialisers.

mod init;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use init::{haar_orthogonal, init_he, init_tensor, InitScheme};

use crate::nn::{LayerSpec, Network, NetworkSpec, NnError};
use crate::tensor::{hash2, Boundary, Precision, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, ArchError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockInit {
    /// Residual convolutions zero, stem and shortcuts channel-averaging.
    #[default]
    Zero,
    /// Every convolution He-initialised; used as a baseline.
    He,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstNetConfig {
    pub n_blocks: usize,
    pub base_width: usize,
    /// Indices of blocks that widen by `stride` and subsample by `stride`.
    pub widen_positions: Vec<usize>,
    pub stride: usize,
    pub use_batchnorm: bool,
    /// Batch-norm before ReLU inside each block; ReLU first when false.
    pub norm_before_relu: bool,
    pub n_classes: usize,
    /// `[H, W, C]`.
    pub input_shape: Vec<usize>,
    pub block_init: BlockInit,
    pub seed: u64,
}

impl Default for ConstNetConfig {
    fn default() -> Self {
        Self {
            n_blocks: 12,
            base_width: 16,
            widen_positions: vec![4, 8],
            stride: 2,
            use_batchnorm: true,
            norm_before_relu: true,
            n_classes: 10,
            input_shape: vec![32, 32, 3],
            block_init: BlockInit::Zero,
            seed: 0,
        }
    }
}

/// Base channel map of one LeakyNet layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerInit {
    Identity,
    Ones,
    Mix { gamma: f64 },
    He,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeakyNetConfig {
    pub slope: f64,
    /// One entry per LeakyNet layer.
    pub per_layer_init: Vec<LayerInit>,
    pub base_width: usize,
    /// Layer indices preceded by a channel-duplicating, subsampling convolution.
    pub widen_positions: Vec<usize>,
    pub stride: usize,
    pub n_classes: usize,
    pub input_shape: Vec<usize>,
    pub seed: u64,
}

impl Default for LeakyNetConfig {
    fn default() -> Self {
        Self {
            slope: 0.01,
            per_layer_init: vec![LayerInit::Identity; 12],
            base_width: 16,
            widen_positions: vec![],
            stride: 2,
            n_classes: 10,
            input_shape: vec![32, 32, 3],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplicatedMlpConfig {
    pub input_shape: Vec<usize>,
    pub width: usize,
    pub n_classes: usize,
    /// Number of distinct hidden rows before noise.
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ReplicatedMlpConfig {
    fn default() -> Self {
        Self {
            input_shape: vec![784],
            width: 64,
            n_classes: 10,
            k: 64,
            lambda: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaOrthogonalConfig {
    pub depth: usize,
    pub width: usize,
    /// Spatial `[H, W]`; the input has `width` channels.
    pub spatial: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for DeltaOrthogonalConfig {
    fn default() -> Self {
        Self {
            depth: 50,
            width: 16,
            spatial: vec![8, 8],
            n_classes: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    ConstNet(ConstNetConfig),
    LeakyNet(LeakyNetConfig),
    ReplicatedMlp(ReplicatedMlpConfig),
    DeltaOrthogonal(DeltaOrthogonalConfig),
}

/// A named intermediate feature: the output of node `node`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tap {
    pub name: String,
    pub node: usize,
}

/// A built network together with its description and the features the
/// verifiers inspect.
#[derive(Clone, Debug)]
pub struct Model {
    pub net: Network,
    pub arch: ArchConfig,
    pub taps: Vec<Tap>,
}

pub fn build(arch: &ArchConfig, precision: Precision) -> Result<Model> {
    match arch {
        ArchConfig::ConstNet(c) => build_constnet(c, precision),
        ArchConfig::LeakyNet(c) => build_leakynet(c, precision),
        ArchConfig::ReplicatedMlp(c) => build_replicated_mlp(c, precision),
        ArchConfig::DeltaOrthogonal(c) => build_delta_orthogonal(c, precision),
    }
}

fn conv(k: usize, c_in: usize, c_out: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        k,
        c_in,
        c_out,
        stride,
        boundary: Boundary::Periodic,
    }
}

fn image_shape(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] if *h > 0 && *w > 0 && *c > 0 => Ok((*h, *w, *c)),
        _ => Err(ArchError::InvalidConfig(format!(
            "input shape must be [H, W, C], got {shape:?}"
        ))),
    }
}

fn set_init(net: &mut Network, name: &str, scheme: &InitScheme, seed: u64) -> Result<()> {
    let shape = net.param(name)?.shape().to_vec();
    let t = init_tensor(&shape, scheme, seed, net.precision())?;
    net.set_param(name, t)?;
    Ok(())
}

fn tap(net: &Network, name: String, id: &str) -> Tap {
    Tap {
        name,
        node: net.node_index(id).expect("node id produced by the builder"),
    }
}

pub fn build_constnet(cfg: &ConstNetConfig, precision: Precision) -> Result<Model> {
    let (h, w, c) = image_shape(&cfg.input_shape)?;
    if cfg.stride < 1 || cfg.base_width == 0 || cfg.n_classes < 2 {
        return Err(ArchError::InvalidConfig(
            "stride, width and class count must be positive".into(),
        ));
    }
    if let Some(&p) = cfg.widen_positions.iter().find(|&&p| p >= cfg.n_blocks) {
        return Err(ArchError::InvalidConfig(format!(
            "widen position {p} outside {} blocks",
            cfg.n_blocks
        )));
    }
    let sub = cfg.stride.pow(cfg.widen_positions.len() as u32);
    if h % sub != 0 || w % sub != 0 {
        return Err(ArchError::InvalidConfig(format!(
            "input {h}x{w} not divisible by total stride {sub}"
        )));
    }
    let mut layers = vec![conv(3, c, cfg.base_width, 1)];
    let mut width = cfg.base_width;
    for b in 0..cfg.n_blocks {
        let widen = cfg.widen_positions.contains(&b);
        let (out, stride) = if widen {
            (width * cfg.stride, cfg.stride)
        } else {
            (width, 1)
        };
        let mut block = Vec::new();
        if cfg.use_batchnorm && cfg.norm_before_relu {
            block.push(LayerSpec::BatchNorm {
                channels: width,
                eps: 1e-5,
            });
        }
        block.push(LayerSpec::Relu);
        if cfg.use_batchnorm && !cfg.norm_before_relu {
            block.push(LayerSpec::BatchNorm {
                channels: width,
                eps: 1e-5,
            });
        }
        block.push(conv(3, width, out, stride));
        layers.push(if widen {
            LayerSpec::WideningHead {
                c_in: width,
                stride: cfg.stride,
                factor: cfg.stride,
                boundary: Boundary::Periodic,
                block,
            }
        } else {
            LayerSpec::SkipAdd { block }
        });
        width = out;
    }
    layers.push(LayerSpec::AvgPoolAll);
    layers.push(LayerSpec::Dense {
        n_in: width,
        n_out: cfg.n_classes,
    });
    layers.push(LayerSpec::Bias {
        channels: cfg.n_classes,
    });
    let n_top = layers.len();
    let mut net = Network::new(NetworkSpec::new(vec![h, w, c], layers), precision)?;

    let he = cfg.block_init == BlockInit::He;
    let weights: Vec<String> = net
        .params()
        .iter()
        .filter(|p| p.role == crate::nn::ParamRole::Weight)
        .map(|p| p.name.clone())
        .collect();
    let head = format!("{}.weight", n_top - 2);
    for (i, name) in weights.iter().enumerate() {
        let scheme = if *name == head {
            InitScheme::Zero
        } else if he {
            InitScheme::He
        } else if name == "0.weight" || name.ends_with(".s.weight") {
            InitScheme::ConstAverage
        } else {
            InitScheme::Zero
        };
        set_init(&mut net, name, &scheme, hash2(cfg.seed, i as u64))?;
    }

    let mut taps = vec![tap(&net, "stem".into(), "0")];
    for b in 0..cfg.n_blocks {
        taps.push(tap(&net, format!("block{b}"), &format!("{}", b + 1)));
    }
    Ok(Model {
        net,
        arch: ArchConfig::ConstNet(cfg.clone()),
        taps,
    })
}

pub fn build_leakynet(cfg: &LeakyNetConfig, precision: Precision) -> Result<Model> {
    let (h, w, c) = image_shape(&cfg.input_shape)?;
    if cfg.slope <= 0.0 || cfg.slope >= 1.0 {
        return Err(ArchError::InvalidConfig(format!("slope {} outside (0, 1)", cfg.slope)));
    }
    let n = cfg.per_layer_init.len();
    if let Some(&p) = cfg.widen_positions.iter().find(|&&p| p >= n) {
        return Err(ArchError::InvalidConfig(format!(
            "widen position {p} outside {n} layers"
        )));
    }
    let mut layers = vec![conv(3, c, cfg.base_width, 1)];
    // (layer id of each LeakyNet conv, its init, its layer index)
    let mut convs = Vec::new();
    let mut dups = Vec::new();
    let mut acts = Vec::new();
    let mut width = cfg.base_width;
    for (l, init) in cfg.per_layer_init.iter().enumerate() {
        if cfg.widen_positions.contains(&l) {
            dups.push((layers.len(), width));
            layers.push(conv(1, width, width * cfg.stride, cfg.stride));
            width *= cfg.stride;
        }
        convs.push((layers.len(), *init, l));
        layers.push(conv(3, width, width, 1));
        acts.push(layers.len());
        layers.push(LayerSpec::LeakyRelu { slope: cfg.slope });
    }
    layers.push(LayerSpec::AvgPoolAll);
    layers.push(LayerSpec::Dense {
        n_in: width,
        n_out: cfg.n_classes,
    });
    layers.push(LayerSpec::Bias {
        channels: cfg.n_classes,
    });
    let mut net = Network::new(NetworkSpec::new(vec![h, w, c], layers), precision)?;

    set_init(&mut net, "0.weight", &InitScheme::ConstAverage, 0)?;
    for (id, width) in &dups {
        let name = format!("{id}.weight");
        let s = cfg.stride;
        let t = Tensor::new(
            &[1, 1, width * s, *width],
            (0..width * s * width)
                .map(|e| if (e / width) / s == e % width { 1.0 } else { 0.0 })
                .collect(),
            precision,
        )?;
        net.set_param(&name, t)?;
    }
    for (id, init, l) in &convs {
        let name = format!("{id}.weight");
        let shape = net.param(&name)?.shape().to_vec();
        let seed = hash2(cfg.seed, *l as u64);
        let t = match init {
            LayerInit::He => init_he(&shape, seed, precision)?,
            other => {
                let base = match other {
                    LayerInit::Identity => InitScheme::DeltaIdentity,
                    LayerInit::Ones => InitScheme::DeltaOnes,
                    LayerInit::Mix { gamma } => InitScheme::LinearMix { gamma: *gamma },
                    LayerInit::He => unreachable!(),
                };
                let m = init_tensor(&shape, &base, seed, Precision::Double)?;
                let scale = if l % 2 == 0 { 1.0 } else { -1.0 / cfg.slope };
                m.scale(scale).to_precision(precision)
            }
        };
        net.set_param(&name, t)?;
    }

    let mut taps = vec![tap(&net, "alpha0".into(), "0")];
    for (k, a) in acts.iter().enumerate() {
        taps.push(tap(&net, format!("alpha{}", k + 1), &format!("{a}")));
    }
    Ok(Model {
        net,
        arch: ArchConfig::LeakyNet(cfg.clone()),
        taps,
    })
}

pub fn build_replicated_mlp(cfg: &ReplicatedMlpConfig, precision: Precision) -> Result<Model> {
    let d: usize = cfg.input_shape.iter().product();
    if d == 0 || cfg.width == 0 || cfg.k == 0 || !cfg.width.is_multiple_of(cfg.k) {
        return Err(ArchError::InvalidConfig(format!(
            "need positive input and width, and k = {} dividing width {}",
            cfg.k, cfg.width
        )));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(ArchError::InvalidConfig(format!(
            "lambda {} outside [0, 1]",
            cfg.lambda
        )));
    }
    let mut layers = Vec::new();
    let flat = cfg.input_shape.len() > 1;
    if flat {
        layers.push(LayerSpec::Flatten);
    }
    let first = layers.len();
    // No biases: `softmax(W2 relu(W1 x))`.
    layers.push(LayerSpec::Dense {
        n_in: d,
        n_out: cfg.width,
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense {
        n_in: cfg.width,
        n_out: cfg.n_classes,
    });
    let mut net = Network::new(NetworkSpec::new(cfg.input_shape.clone(), layers), precision)?;
    set_init(
        &mut net,
        &format!("{first}.weight"),
        &InitScheme::Replicated {
            k: cfg.k,
            lambda: cfg.lambda,
        },
        hash2(cfg.seed, 1),
    )?;
    set_init(
        &mut net,
        &format!("{}.weight", first + 2),
        &InitScheme::He,
        hash2(cfg.seed, 2),
    )?;
    let taps = vec![tap(&net, "hidden".into(), &format!("{first}"))];
    Ok(Model {
        net,
        arch: ArchConfig::ReplicatedMlp(cfg.clone()),
        taps,
    })
}

/// Stack of `depth` delta-orthogonal periodic convolutions with ReLU. The
/// input must have `width` channels; see [`augment_input`].
pub fn build_delta_orthogonal(cfg: &DeltaOrthogonalConfig, precision: Precision) -> Result<Model> {
    let [h, w] = cfg.spatial[..] else {
        return Err(ArchError::InvalidConfig(format!(
            "spatial must be [H, W], got {:?}",
            cfg.spatial
        )));
    };
    if !cfg.width.is_multiple_of(2) || cfg.width == 0 || cfg.depth == 0 {
        return Err(ArchError::InvalidConfig("width must be even and depth positive".into()));
    }
    let mut layers = Vec::new();
    for _ in 0..cfg.depth {
        layers.push(conv(3, cfg.width, cfg.width, 1));
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::AvgPoolAll);
    layers.push(LayerSpec::Dense {
        n_in: cfg.width,
        n_out: cfg.n_classes,
    });
    let mut net = Network::new(NetworkSpec::new(vec![h, w, cfg.width], layers), precision)?;
    let mut taps = Vec::new();
    for l in 0..cfg.depth {
        let id = format!("{}", 2 * l);
        set_init(
            &mut net,
            &format!("{id}.weight"),
            &InitScheme::DeltaOrthogonal,
            hash2(cfg.seed, l as u64),
        )?;
        taps.push(tap(&net, format!("pre{}", l + 1), &id));
    }
    Ok(Model {
        net,
        arch: ArchConfig::DeltaOrthogonal(cfg.clone()),
        taps,
    })
}

/// Append as many zero channels as there are input channels: `(x, 0)`.
pub fn augment_input(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let c = *s.last().ok_or_else(|| ArchError::InvalidConfig("empty shape".into()))?;
    let mut shape = s.to_vec();
    *shape.last_mut().expect("non-empty") = 2 * c;
    let mut data = Vec::with_capacity(2 * x.len());
    for px in x.data().chunks(c) {
        data.extend_from_slice(px);
        data.extend(std::iter::repeat_n(0.0, c));
    }
    Ok(Tensor::new(&shape, data, x.precision())?)
}

use serde::{Deserialize, Serialize};

use crate::tensor::Boundary;

/// One layer of a network description. Convolution and dense layers carry no
/// bias; use a [`LayerSpec::Bias`] layer where one is wanted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[B, n_in] -> [B, n_out]`, weight `[n_out, n_in]`.
    Dense {
        n_in: usize,
        n_out: usize,
    },
    /// `[B, H, W, c_in] -> [B, H', W', c_out]`, weight `[k, k, c_out, c_in]`.
    Conv {
        k: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
        boundary: Boundary,
    },
    /// Per-channel bias on the last axis.
    Bias {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    /// Normalises each channel over batch and spatial axes.
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    /// Mean over spatial axes: `[B, H, W, C] -> [B, C]`.
    AvgPoolAll,
    /// `[B, ...] -> [B, prod(...)]`.
    Flatten,
    /// `x + block(x)`.
    SkipAdd {
        block: Vec<LayerSpec>,
    },
    /// `shortcut(x) + block(x)` where the shortcut is a trainable 1x1
    /// convolution with the given stride from `c_in` to `factor * c_in`
    /// channels.
    WideningHead {
        c_in: usize,
        stride: usize,
        factor: usize,
        boundary: Boundary,
        block: Vec<LayerSpec>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Per-sample input shape, `[H, W, C]` or `[n]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { input_shape, layers }
    }
}

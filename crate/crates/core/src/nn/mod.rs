//! Layers with forward and reverse-mode passes, losses, and the layer pipeline.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod inception;
mod init;
mod layer;
mod loss;
mod network;
mod pool;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Tensor, TensorError};

pub use activation::{Flatten, Relu, Softmax};
pub use batchnorm::{BatchNorm, BatchStats};
pub use conv::{conv_output_len, Conv2d};
pub use dense::Dense;
pub use inception::Inception;
pub use layer::Layer;
pub use loss::{cross_entropy, cross_entropy_grad, one_hot, softmax, softmax_cross_entropy_grad};
pub use network::Network;
pub use pool::MaxPool2d;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("layer {layer}: invalid spec, {detail}")]
    InvalidSpec { layer: usize, detail: String },
    #[error("network has no layers")]
    Empty,
    #[error("{0}")]
    Input(String),
    #[error("backward called before a forward pass")]
    NoForwardCache,
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Batch statistics are used and updated in `Train`; running statistics are
/// used read-only in `Infer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape()).expect("value shape is valid");
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Element>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
        }
    }
}

pub const DEFAULT_BN_EPSILON: f64 = 1e-3;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;

/// Declarative description of one layer. Shapes are per-sample (batch axis
/// excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    Dense {
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Relu,
    Flatten,
    Softmax,
    Inception {
        b1: usize,
        b3: usize,
        b5: usize,
        bpool: usize,
    },
}

impl LayerSpec {
    pub const TAGS: [&'static str; 8] = [
        "conv2d",
        "max_pool2d",
        "dense",
        "batch_norm",
        "relu",
        "flatten",
        "softmax",
        "inception",
    ];

    pub fn conv(out_channels: usize, kernel: usize, padding: Padding) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel: [kernel, kernel],
            stride: 1,
            padding,
        }
    }

    pub fn pool2() -> Self {
        LayerSpec::MaxPool2d { size: 2, stride: 2 }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerSpec::BatchNorm {
            channels,
            epsilon: DEFAULT_BN_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "max_pool2d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Inception { .. } => "inception",
        }
    }

    /// Whether the layer owns trainable parameters.
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } | LayerSpec::BatchNorm { .. } | LayerSpec::Inception { .. }
        )
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        let spatial = |what: &str| -> std::result::Result<(usize, usize, usize), String> {
            match input {
                [c, h, w] => Ok((*c, *h, *w)),
                _ => Err(format!("{what} needs a [C,H,W] input, got {input:?}")),
            }
        };
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel: [kh, kw],
                stride,
                padding,
            } => {
                if out_channels == 0 || kh == 0 || kw == 0 || stride == 0 {
                    return Err("conv2d counts must be at least 1".into());
                }
                let (_, h, w) = spatial("conv2d")?;
                let (ph, pw) = same_pad(padding, kh, kw)?;
                let ho = conv_output_len(h, kh, stride, ph).map_err(|e| e.to_string())?;
                let wo = conv_output_len(w, kw, stride, pw).map_err(|e| e.to_string())?;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err("max_pool2d size and stride must be at least 1".into());
                }
                let (c, h, w) = spatial("max_pool2d")?;
                if size > h || size > w {
                    return Err(format!("pool window {size} larger than input {h}x{w}"));
                }
                Ok(vec![c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::Dense { out_features } => {
                if out_features == 0 {
                    return Err("dense out_features must be at least 1".into());
                }
                match input {
                    [_] => Ok(vec![out_features]),
                    _ => Err(format!("dense needs a flat input, got {input:?}")),
                }
            }
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => {
                if channels == 0 {
                    return Err("batch_norm channels must be at least 1".into());
                }
                if !(epsilon > 0.0) || !(momentum > 0.0 && momentum < 1.0) {
                    return Err("batch_norm needs epsilon > 0 and momentum in (0,1)".into());
                }
                if input.first() != Some(&channels) {
                    return Err(format!(
                        "batch_norm over {channels} channels applied to input {input:?}"
                    ));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => match input {
                [k] if *k >= 2 => Ok(vec![*k]),
                _ => Err(format!("softmax needs a flat input of at least 2 classes, got {input:?}")),
            },
            LayerSpec::Inception { b1, b3, b5, bpool } => {
                if b1 == 0 || b3 == 0 || b5 == 0 || bpool == 0 {
                    return Err("inception branch widths must be at least 1".into());
                }
                let (_, h, w) = spatial("inception")?;
                Ok(vec![b1 + b3 + b5 + bpool, h, w])
            }
        }
    }
}

pub(crate) fn same_pad(padding: Padding, kh: usize, kw: usize) -> std::result::Result<(usize, usize), String> {
    match padding {
        Padding::Valid => Ok((0, 0)),
        Padding::Same if kh % 2 == 1 && kw % 2 == 1 => Ok(((kh - 1) / 2, (kw - 1) / 2)),
        Padding::Same => Err(format!("same padding needs odd kernels, got {kh}x{kw}")),
    }
}

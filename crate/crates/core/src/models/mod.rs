//! Architecture builders and the model file format.

mod persist;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassLabel, Preprocessing, IMAGE_SIDE};
use crate::nn::{LayerSpec, Network, NnError, Padding};

pub use persist::{
    decode_model, encode_model, load_model, load_model_expecting, save_model, ModelHeader, TensorEntry,
    FORMAT_VERSION, MODEL_MAGIC,
};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid width multiplier {0}: {1}")]
    Width(f64, String),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("architecture does not validate: {0}")]
    Shape(#[from] NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads {expected})")]
    Version { found: String, expected: u32 },
    #[error("truncated model file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("header declares {declared} payload bytes but its tensors need {computed}")]
    LengthMismatch { declared: usize, computed: usize },
    #[error("unknown layer tag {0:?}")]
    UnknownLayer(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("preprocessing fingerprint mismatch: model has {found}, caller requested {expected}")]
    Fingerprint { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    CustomCnn,
    Vgg16Style,
    InceptionSmall,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::CustomCnn, Arch::Vgg16Style, Arch::InceptionSmall];

    pub fn name(self) -> &'static str {
        match self {
            Arch::CustomCnn => "custom_cnn",
            Arch::Vgg16Style => "vgg16_style",
            Arch::InceptionSmall => "inception_small",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture {s:?} (expected custom_cnn, vgg16_style or inception_small)"))
    }
}

/// A fully resolved architecture: which builder, on what input, with which
/// layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: Arch,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub width_mult: f64,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Builds `arch` for `(channels, 90, 90)` input.
    pub fn new(arch: Arch, channels: usize, width_mult: f64) -> Result<Self> {
        Self::with_side(arch, channels, width_mult, IMAGE_SIDE)
    }

    /// Builds `arch` for a square input of another side length.
    pub fn with_side(arch: Arch, channels: usize, width_mult: f64, side: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(ModelError::Channels(channels));
        }
        if !(width_mult.is_finite() && width_mult > 0.0) {
            return Err(ModelError::Width(width_mult, "must be a positive finite number".into()));
        }
        let layers = match arch {
            Arch::CustomCnn => custom_cnn_layers(channels, width_mult, side)?,
            Arch::Vgg16Style => vgg16_layers(width_mult)?,
            Arch::InceptionSmall => inception_layers(channels, width_mult, side)?,
        };
        let spec = ModelSpec {
            name: arch,
            channels,
            height: side,
            width: side,
            num_classes: NUM_CLASSES,
            width_mult,
            layers,
        };
        trace(&spec.layers, &spec.input_shape())?;
        Ok(spec)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Instantiates and initializes a network from a seed.
    pub fn network(&self, seed: u64) -> Result<Network<f32>> {
        Ok(Network::build(&self.layers, &self.input_shape(), seed)?)
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing::new(self.channels)
    }
}

pub fn build_custom_cnn(channels: usize, width_mult: f64) -> Result<ModelSpec> {
    ModelSpec::new(Arch::CustomCnn, channels, width_mult)
}

pub fn build_vgg16_style(channels: usize, width_mult: f64) -> Result<ModelSpec> {
    ModelSpec::new(Arch::Vgg16Style, channels, width_mult)
}

pub fn build_inception_small(channels: usize, width_mult: f64) -> Result<ModelSpec> {
    ModelSpec::new(Arch::InceptionSmall, channels, width_mult)
}

/// `round(base·width_mult)`, rejecting widths that round to zero.
fn scaled(base: usize, width_mult: f64) -> Result<usize> {
    let w = (base as f64 * width_mult).round();
    if w < 1.0 {
        return Err(ModelError::Width(
            width_mult,
            format!("width {base} scales to zero"),
        ));
    }
    Ok(w as usize)
}

/// Per-sample shape after `layers` on `input`, or the chain error.
fn trace(layers: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, l) in layers.iter().enumerate() {
        shape = l
            .output_shape(&shape)
            .map_err(|detail| ModelError::Shape(NnError::Shape { layer: i, detail }))?;
    }
    Ok(shape)
}

fn classifier_head(layers: &mut Vec<LayerSpec>, input: &[usize]) -> Result<()> {
    layers.push(LayerSpec::Flatten);
    let flat = trace(layers, input)?[0];
    layers.push(LayerSpec::batch_norm(flat));
    layers.push(LayerSpec::Dense { out_features: NUM_CLASSES });
    layers.push(LayerSpec::Softmax);
    Ok(())
}

fn custom_cnn_layers(channels: usize, width_mult: f64, side: usize) -> Result<Vec<LayerSpec>> {
    if width_mult * 32.0 < 1.0 {
        return Err(ModelError::Width(width_mult, "needs width_mult·32 ≥ 1".into()));
    }
    let mut layers = Vec::new();
    for base in [32, 64, 128] {
        layers.push(LayerSpec::conv(scaled(base, width_mult)?, 3, Padding::Valid));
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::pool2());
    }
    classifier_head(&mut layers, &[channels, side, side])?;
    Ok(layers)
}

/// Canonical VGG-16: 13 same-padded 3×3 convolutions in five pooled blocks,
/// then two hidden dense layers and the class layer (16 weight layers).
fn vgg16_layers(width_mult: f64) -> Result<Vec<LayerSpec>> {
    if width_mult * 64.0 < 1.0 {
        return Err(ModelError::Width(width_mult, "needs width_mult·64 ≥ 1".into()));
    }
    const BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut layers = Vec::new();
    for (base, convs) in BLOCKS {
        for _ in 0..convs {
            layers.push(LayerSpec::conv(scaled(base, width_mult)?, 3, Padding::Same));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::pool2());
    }
    layers.push(LayerSpec::Flatten);
    let hidden = scaled(256, width_mult)?;
    for _ in 0..2 {
        layers.push(LayerSpec::Dense { out_features: hidden });
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Dense { out_features: NUM_CLASSES });
    layers.push(LayerSpec::Softmax);
    Ok(layers)
}

fn inception_layers(channels: usize, width_mult: f64, side: usize) -> Result<Vec<LayerSpec>> {
    let block = |b1: usize, b3: usize, b5: usize, bp: usize| -> Result<LayerSpec> {
        Ok(LayerSpec::Inception {
            b1: scaled(b1, width_mult)?,
            b3: scaled(b3, width_mult)?,
            b5: scaled(b5, width_mult)?,
            bpool: scaled(bp, width_mult)?,
        })
    };
    let mut layers = vec![
        LayerSpec::conv(scaled(16, width_mult)?, 3, Padding::Same),
        LayerSpec::Relu,
        LayerSpec::pool2(),
        block(16, 32, 8, 8)?,
        LayerSpec::pool2(),
        block(32, 64, 16, 16)?,
    ];
    classifier_head(&mut layers, &[channels, side, side])?;
    Ok(layers)
}

/// Class names in label order.
pub fn class_names() -> Vec<String> {
    ClassLabel::ALL.iter().map(|c| c.name().to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;
    use crate::tensor::Tensor;

    fn spatial_trace(spec: &ModelSpec) -> Vec<usize> {
        let net = Network::<f32>::new(&spec.layers, &spec.input_shape()).unwrap();
        let mut trace = vec![spec.height];
        for (s, out) in spec.layers.iter().zip(net.output_shapes()) {
            if matches!(s, LayerSpec::Conv2d { .. } | LayerSpec::MaxPool2d { .. }) && out[1] != *trace.last().unwrap() {
                trace.push(out[1]);
            }
        }
        trace
    }

    #[test]
    fn custom_cnn_trace_and_flatten_width() {
        let spec = build_custom_cnn(1, 1.0).unwrap();
        assert_eq!(spatial_trace(&spec), vec![90, 88, 44, 42, 21, 19, 9]);
        let net = Network::<f32>::new(&spec.layers, &spec.input_shape()).unwrap();
        let flat = spec.layers.iter().position(|l| *l == LayerSpec::Flatten).unwrap();
        assert_eq!(net.output_shapes()[flat], vec![10368]);
        assert_eq!(128 * 9 * 9, 10368);
    }

    #[test]
    fn custom_cnn_quarter_width() {
        let spec = build_custom_cnn(1, 0.25).unwrap();
        let widths: Vec<usize> = spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![8, 16, 32]);
    }

    #[test]
    fn every_builder_ends_in_dense3_softmax() {
        for arch in Arch::ALL {
            for channels in [1, 3] {
                for wm in [0.125, 0.25, 1.0] {
                    let spec = ModelSpec::new(arch, channels, wm).unwrap();
                    let n = spec.layers.len();
                    assert_eq!(spec.layers[n - 2], LayerSpec::Dense { out_features: 3 });
                    assert_eq!(spec.layers[n - 1], LayerSpec::Softmax);
                }
            }
        }
    }

    #[test]
    fn vgg_has_sixteen_weight_layers_and_expected_trace() {
        let spec = build_vgg16_style(1, 0.125).unwrap();
        let convs = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Conv2d { .. })).count();
        let dense = spec.layers.iter().filter(|l| matches!(l, LayerSpec::Dense { .. })).count();
        assert_eq!((convs, dense), (13, 3));
        let net = Network::<f32>::new(&spec.layers, &spec.input_shape()).unwrap();
        let pools: Vec<usize> = spec
            .layers
            .iter()
            .zip(net.output_shapes())
            .filter(|(l, _)| matches!(l, LayerSpec::MaxPool2d { .. }))
            .map(|(_, s)| s[1])
            .collect();
        assert_eq!(pools, vec![45, 22, 11, 5, 2]);
        let LayerSpec::Conv2d { out_channels, .. } = spec.layers[0] else { panic!() };
        assert_eq!(out_channels, 8);
    }

    #[test]
    fn inception_blocks_sum_branches() {
        let spec = build_inception_small(1, 1.0).unwrap();
        let net = Network::<f32>::new(&spec.layers, &spec.input_shape()).unwrap();
        let blocks: Vec<(usize, &Vec<usize>)> = spec
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Inception { .. }))
            .map(|(i, _)| (i, &net.output_shapes()[i]))
            .collect();
        assert_eq!(blocks[0].1, &vec![64, 45, 45]);
        assert_eq!(blocks[1].1, &vec![128, 22, 22]);
        for (i, out) in blocks {
            assert_eq!(net.output_shapes()[i - 1][1..], out[1..]);
        }
    }

    #[test]
    fn inception_forward_is_a_distribution() {
        let net = build_inception_small(1, 0.25).unwrap().network(3).unwrap();
        let x = Tensor::full(&[1, 1, 90, 90], 0.5f32).unwrap();
        let p = net.predict(&x).unwrap();
        assert_eq!(p.shape(), &[1, 3]);
        assert!((p.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn width_errors() {
        assert!(build_custom_cnn(1, 1.0 / 64.0).is_err());
        assert!(build_custom_cnn(1, 0.0).is_err());
        assert!(build_inception_small(1, 0.05).is_err());
        assert!(build_custom_cnn(2, 1.0).is_err());
        assert!(ModelSpec::with_side(Arch::CustomCnn, 1, 1.0, 12).is_err());
    }

    #[test]
    fn parameter_counts_are_pure() {
        for arch in Arch::ALL {
            let a = ModelSpec::new(arch, 1, 0.25).unwrap().network(1).unwrap().param_count();
            let b = ModelSpec::new(arch, 1, 0.25).unwrap().network(99).unwrap().param_count();
            assert_eq!(a, b);
        }
        // conv 32·(9+1) + 64·(288+1) + 128·(576+1) + bn 2·10368 + dense 10368·3+3
        let custom = build_custom_cnn(1, 1.0).unwrap().network(0).unwrap();
        assert_eq!(custom.param_count(), 320 + 18496 + 73856 + 20736 + 31107);
        let Layer::BatchNorm(_) = &custom.layers()[10] else { panic!("batch norm after flatten") };
    }
}

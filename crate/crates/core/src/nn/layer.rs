use super::{
    BatchNorm, Conv2d, Dense, Flatten, Inception, LayerSpec, MaxPool2d, Mode, NnError, Param, Relu,
    Result, Softmax,
};
use crate::tensor::{Element, Tensor};

/// A concrete layer instance built from a [`LayerSpec`].
#[derive(Debug, Clone)]
pub enum Layer<T: Element = f32> {
    Conv2d(Conv2d<T>),
    MaxPool2d(MaxPool2d),
    Dense(Dense<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    Flatten(Flatten),
    Softmax(Softmax<T>),
    Inception(Box<Inception<T>>),
}

impl<T: Element> Layer<T> {
    /// Instantiates `spec` for a per-sample input shape. Parameters start at
    /// their zero/one defaults; initialization is applied by the network.
    pub fn from_spec(spec: &LayerSpec, input: &[usize]) -> Result<Self> {
        Ok(match *spec {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(input[0], out_channels, kernel, stride, padding)?),
            LayerSpec::MaxPool2d { size, stride } => Layer::MaxPool2d(MaxPool2d::new(size, stride)?),
            LayerSpec::Dense { out_features } => Layer::Dense(Dense::new(input[0], out_features)?),
            LayerSpec::BatchNorm {
                channels,
                epsilon,
                momentum,
            } => Layer::BatchNorm(BatchNorm::new(channels, epsilon, momentum)?),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Flatten => Layer::Flatten(Flatten::default()),
            LayerSpec::Softmax => Layer::Softmax(Softmax::default()),
            LayerSpec::Inception { b1, b3, b5, bpool } => {
                Layer::Inception(Box::new(Inception::new(input[0], b1, b3, b5, bpool)?))
            }
        })
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.infer(x),
            Layer::MaxPool2d(l) => l.infer(x),
            Layer::Dense(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::Relu(l) => Ok(l.infer(x)),
            Layer::Flatten(l) => l.infer(x),
            Layer::Softmax(l) => l.infer(x),
            Layer::Inception(l) => l.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::Flatten(l) => l.forward(x),
            Layer::Softmax(l) => l.forward(x),
            Layer::Inception(l) => l.forward(x, mode),
        }
    }

    /// Read-only forward pass on the piecewise-linear piece selected by the
    /// last training pass: ReLU masks and pool winners are reused rather than
    /// recomputed, and batch norm normalizes with batch statistics.
    pub fn replay(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Relu(l) => l.replay(x),
            Layer::MaxPool2d(l) => l.replay(x),
            Layer::BatchNorm(l) => l.replay(x),
            Layer::Inception(l) => l.replay(x),
            _ => self.infer(x),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient, or
    /// `None` when `need_dx` is false and the layer can skip computing it.
    pub fn backward(&mut self, upstream: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        match self {
            Layer::Conv2d(l) => l.backward(upstream, need_dx),
            Layer::Dense(l) => l.backward(upstream, need_dx),
            Layer::Inception(l) => l.backward(upstream, need_dx),
            Layer::MaxPool2d(l) => l.backward(upstream).map(Some),
            Layer::BatchNorm(l) => l.backward(upstream).map(Some),
            Layer::Relu(l) => l.backward(upstream).map(Some),
            Layer::Flatten(l) => l.backward(upstream).map(Some),
            Layer::Softmax(l) => l.backward(upstream).map(Some),
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv2d(l) => l.params_mut(),
            Layer::Dense(l) => l.params_mut(),
            Layer::BatchNorm(l) => l.params_mut(),
            Layer::Inception(l) => l.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv2d(l) => l.params(),
            Layer::Dense(l) => l.params(),
            Layer::BatchNorm(l) => l.params(),
            Layer::Inception(l) => l.params(),
            _ => Vec::new(),
        }
    }

    /// Every persisted tensor (parameters, then running statistics) with a
    /// stable name suffix.
    pub fn state(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![("weight", &l.weight.value), ("bias", &l.bias.value)],
            Layer::Dense(l) => vec![("weight", &l.weight.value), ("bias", &l.bias.value)],
            Layer::BatchNorm(l) => vec![
                ("gamma", &l.gamma.value),
                ("beta", &l.beta.value),
                ("running_mean", &l.stats.running_mean),
                ("running_var", &l.stats.running_var),
            ],
            Layer::Inception(l) => {
                const NAMES: [[&str; 2]; 4] = [
                    ["b1.weight", "b1.bias"],
                    ["b3.weight", "b3.bias"],
                    ["b5.weight", "b5.bias"],
                    ["bpool.weight", "bpool.bias"],
                ];
                l.convs()
                    .into_iter()
                    .zip(NAMES)
                    .flat_map(|(c, [w, b])| [(w, &c.weight.value), (b, &c.bias.value)])
                    .collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::Dense(l) => vec![&mut l.weight.value, &mut l.bias.value],
            Layer::BatchNorm(l) => vec![
                &mut l.gamma.value,
                &mut l.beta.value,
                &mut l.stats.running_mean,
                &mut l.stats.running_var,
            ],
            Layer::Inception(l) => l
                .convs_mut()
                .into_iter()
                .flat_map(|c| [&mut c.weight.value, &mut c.bias.value])
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Appends the piecewise-linear switch states (ReLU masks, pool winners)
    /// cached by the last training forward pass.
    pub fn switch_pattern(&self, out: &mut Vec<usize>) {
        match self {
            Layer::Relu(r) => out.extend(r.mask().unwrap_or_default().iter().map(|&on| on as usize)),
            Layer::MaxPool2d(p) => out.extend(p.winners().unwrap_or_default()),
            Layer::Inception(b) => b.switch_pattern(out),
            _ => {}
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.clear_cache(),
            Layer::MaxPool2d(l) => l.clear_cache(),
            Layer::Dense(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::Relu(l) => l.clear_cache(),
            Layer::Flatten(l) => l.clear_cache(),
            Layer::Softmax(l) => l.clear_cache(),
            Layer::Inception(l) => l.clear_cache(),
        }
    }

    pub fn cast<U: Element>(&self) -> Layer<U> {
        match self {
            Layer::Conv2d(l) => Layer::Conv2d(l.cast()),
            Layer::MaxPool2d(l) => {
                let mut l = l.clone();
                l.clear_cache();
                Layer::MaxPool2d(l)
            }
            Layer::Dense(l) => Layer::Dense(l.cast()),
            Layer::BatchNorm(l) => Layer::BatchNorm(l.cast()),
            Layer::Relu(_) => Layer::Relu(Relu::default()),
            Layer::Flatten(_) => Layer::Flatten(Flatten::default()),
            Layer::Softmax(_) => Layer::Softmax(Softmax::default()),
            Layer::Inception(l) => Layer::Inception(Box::new(l.cast())),
        }
    }

    pub(crate) fn require_softmax(&self) -> Result<()> {
        match self {
            Layer::Softmax(_) => Ok(()),
            _ => Err(NnError::Input("network does not end in softmax".into())),
        }
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::{glorot_uniform, he_uniform};
use super::{Layer, LayerSpec, Mode, NnError, Param, Result};
use crate::tensor::{Element, Tensor};

/// Ordered layer pipeline with a validated shape chain.
#[derive(Debug, Clone)]
pub struct Network<T: Element = f32> {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    output_shapes: Vec<Vec<usize>>,
    layers: Vec<Layer<T>>,
}

impl<T: Element> Network<T> {
    /// Validates the shape chain and instantiates layers with default
    /// (uninitialized) parameters: zero weights and biases, γ=1, β=0.
    pub fn new(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Self> {
        if specs.is_empty() {
            return Err(NnError::Empty);
        }
        let mut shape = input_shape.to_vec();
        let mut output_shapes = Vec::with_capacity(specs.len());
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            if matches!(spec, LayerSpec::Softmax) && i + 1 != specs.len() {
                return Err(NnError::InvalidSpec {
                    layer: i,
                    detail: "softmax is only allowed as the final layer".into(),
                });
            }
            let out = spec
                .output_shape(&shape)
                .map_err(|detail| NnError::Shape { layer: i, detail })?;
            layers.push(
                Layer::from_spec(spec, &shape).map_err(|e| NnError::InvalidSpec {
                    layer: i,
                    detail: e.to_string(),
                })?,
            );
            output_shapes.push(out.clone());
            shape = out;
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            specs: specs.to_vec(),
            output_shapes,
            layers,
        })
    }

    /// Builds and initializes from a seed.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::new(specs, input_shape)?;
        net.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(net)
    }

    /// He-uniform for conv and dense layers feeding ReLU, Glorot-uniform for a
    /// dense layer feeding the softmax head; biases zero, γ=1, β=0.
    pub fn initialize(&mut self, rng: &mut impl rand::Rng) {
        let n = self.layers.len();
        for i in 0..n {
            let head = i + 1 < n && matches!(self.specs[i + 1], LayerSpec::Softmax);
            match &mut self.layers[i] {
                Layer::Conv2d(c) => {
                    let (fan_in, _) = c.fans();
                    he_uniform(&mut c.weight, fan_in, rng);
                    c.bias.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
                Layer::Dense(d) => {
                    let (fan_in, fan_out) = d.fans();
                    if head {
                        glorot_uniform(&mut d.weight, fan_in, fan_out, rng);
                    } else {
                        he_uniform(&mut d.weight, fan_in, rng);
                    }
                    d.bias.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
                Layer::Inception(b) => {
                    for c in b.convs_mut() {
                        let (fan_in, _) = c.fans();
                        he_uniform(&mut c.weight, fan_in, rng);
                        c.bias.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                Layer::BatchNorm(bn) => {
                    bn.gamma.value.data_mut().iter_mut().for_each(|v| *v = T::one());
                    bn.beta.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
                _ => {}
            }
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.output_shapes.last().expect("non-empty network")
    }

    /// Per-layer per-sample output shapes.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.output_shapes
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(NnError::Input(format!(
                "network expects [N, {}] input, got {:?}",
                self.input_shape
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
                x.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass that caches activations for a following backward pass.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    /// Inference forward pass. Read-only, so concurrent callers may share the
    /// network.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Runs layers `start..` through [`Layer::replay`] on `h`, the input of
    /// layer `start`. Where no ReLU or pool switch flips, this reproduces the
    /// training forward pass exactly; elsewhere it extends the current linear
    /// piece, whose derivative is what back-propagation computes.
    pub fn replay_from(&self, start: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = h.clone();
        for layer in &self.layers[start..] {
            h = layer.replay(&h)?;
        }
        Ok(h)
    }

    fn backward_range(&mut self, upstream: &Tensor<T>, end: usize, need_input: bool) -> Result<Option<Tensor<T>>> {
        let mut g = upstream.clone();
        for i in (0..end).rev() {
            let need_dx = i > 0 || need_input;
            match self.layers[i].backward(&g, need_dx)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    /// Back-propagates the gradient of the loss with respect to the network
    /// output, accumulating into every parameter's gradient.
    pub fn backward(&mut self, dout: &Tensor<T>) -> Result<()> {
        self.backward_range(dout, self.layers.len(), false).map(|_| ())
    }

    /// Like [`backward`](Self::backward) but also returns the gradient with
    /// respect to the network input.
    pub fn backward_to_input(&mut self, dout: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .backward_range(dout, self.layers.len(), true)?
            .expect("input gradient requested"))
    }

    /// Starts back-propagation below the final softmax, from a gradient on the
    /// logits (the fused softmax + cross-entropy path).
    pub fn backward_from_logits(&mut self, dlogits: &Tensor<T>) -> Result<()> {
        let last = self.layers.len() - 1;
        self.layers[last].require_softmax()?;
        self.backward_range(dlogits, last, false).map(|_| ())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// ReLU on/off states and max-pool winners from the last training forward
    /// pass. Two passes with different patterns straddle a point where the
    /// network is not differentiable.
    pub fn switch_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.switch_pattern(&mut out);
        }
        out
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    /// Copy of the network in another precision; caches are dropped.
    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            specs: self.specs.clone(),
            output_shapes: self.output_shapes.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }
}

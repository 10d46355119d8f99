use super::loss::softmax;
use super::{NnError, Result};
use crate::tensor::{Element, Tensor, TensorError};

fn check_upstream(op: &'static str, expected: &[usize], upstream: &[usize]) -> Result<()> {
    if expected != upstream {
        return Err(TensorError::ShapeMismatch {
            op,
            left: expected.to_vec(),
            right: upstream.to_vec(),
        }
        .into());
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<(Vec<usize>, Vec<bool>)>,
}

impl Relu {
    pub fn infer<T: Element>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.relu()
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.mask = Some((
            x.shape().to_vec(),
            x.data().iter().map(|&v| v > T::zero()).collect(),
        ));
        x.relu()
    }

    pub fn backward<T: Element>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self.mask.as_ref().ok_or(NnError::NoForwardCache)?;
        check_upstream("relu backward", shape, upstream.shape())?;
        let data = upstream
            .data()
            .iter()
            .zip(mask)
            .map(|(&g, &on)| if on { g } else { T::zero() })
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    /// Applies the on/off mask recorded by the last training forward pass
    /// instead of recomputing it from `x`.
    pub fn replay<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, mask) = self.mask.as_ref().ok_or(NnError::NoForwardCache)?;
        check_upstream("relu replay", shape, x.shape())?;
        let data = x
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &on)| if on { v } else { T::zero() })
            .collect();
        Ok(Tensor::new(shape, data)?)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }

    /// On/off state of every unit from the last training forward pass.
    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_ref().map(|(_, m)| m.as_slice())
    }
}

/// Collapses `[N, ...]` to `[N, prod(...)]`.
#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn infer<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        Ok(x.reshape(&[n, x.len() / n])?)
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_shape = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward<T: Element>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.input_shape.as_ref().ok_or(NnError::NoForwardCache)?;
        Ok(upstream.reshape(shape)?)
    }

    pub fn clear_cache(&mut self) {
        self.input_shape = None;
    }
}

#[derive(Debug, Clone)]
pub struct Softmax<T: Element = f32> {
    output: Option<Tensor<T>>,
}

impl<T: Element> Default for Softmax<T> {
    fn default() -> Self {
        Softmax { output: None }
    }
}

impl<T: Element> Softmax<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax(x)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let p = softmax(x)?;
        self.output = Some(p.clone());
        Ok(p)
    }

    /// `dlogits = p ⊙ (up − Σ_k up_k·p_k)` per row.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.output.as_ref().ok_or(NnError::NoForwardCache)?;
        check_upstream("softmax backward", p.shape(), upstream.shape())?;
        let k = p.shape()[1];
        let mut out = vec![T::zero(); p.len()];
        for ((o, pr), ur) in out.chunks_mut(k).zip(p.data().chunks(k)).zip(upstream.data().chunks(k)) {
            let dot = pr.iter().zip(ur).fold(T::zero(), |a, (&pv, &uv)| a + pv * uv);
            for ((ov, &pv), &uv) in o.iter_mut().zip(pr).zip(ur) {
                *ov = pv * (uv - dot);
            }
        }
        Ok(Tensor::new(p.shape(), out)?)
    }

    pub fn clear_cache(&mut self) {
        self.output = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_backward_masks() {
        let mut r = Relu::default();
        let x = Tensor::new(&[1, 4], vec![-1.0f32, 0.0, 0.5, 2.0]).unwrap();
        r.forward(&x);
        let g = r.backward(&Tensor::full(&[1, 4], 3.0f32).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut f = Flatten::default();
        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32).unwrap();
        let y = f.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
        assert_eq!(f.backward(&y).unwrap(), x);
    }
}

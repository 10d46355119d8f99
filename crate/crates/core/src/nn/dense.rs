use super::{NnError, Param, Result};
use crate::tensor::gemm::{gemm, transpose_into};
use crate::tensor::{Element, Tensor, TensorError};

/// Fully connected layer, `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Dense<T: Element = f32> {
    in_features: usize,
    out_features: usize,
    /// `[D, M]`
    pub weight: Param<T>,
    /// `[M]`
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Element> Dense<T> {
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(NnError::Input("dense features must be at least 1".into()));
        }
        Ok(Dense {
            in_features,
            out_features,
            weight: Param::new(Tensor::zeros(&[in_features, out_features])?),
            bias: Param::new(Tensor::zeros(&[out_features])?),
            cache: None,
        })
    }

    pub fn fans(&self) -> (usize, usize) {
        (self.in_features, self.out_features)
    }

    fn batch(&self, x: &Tensor<T>) -> Result<usize> {
        match x.shape() {
            &[n, d] if d == self.in_features => Ok(n),
            other => Err(TensorError::ShapeMismatch {
                op: "dense",
                left: other.to_vec(),
                right: self.weight.value.shape().to_vec(),
            }
            .into()),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.batch(x)?;
        let m = self.out_features;
        let mut y = vec![T::zero(); n * m];
        gemm(n, m, self.in_features, x.data(), self.weight.value.data(), &mut y, false);
        for row in y.chunks_mut(m) {
            for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                *v = *v + b;
            }
        }
        Ok(Tensor::new(&[n, m], y)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// `dx = up·Wᵀ`, `dW += xᵀ·up`, `db += Σ_rows up`.
    pub fn backward(&mut self, upstream: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or(NnError::NoForwardCache)?;
        let (n, d, m) = (x.shape()[0], self.in_features, self.out_features);
        if upstream.shape() != [n, m] {
            return Err(TensorError::ShapeMismatch {
                op: "dense backward",
                left: vec![n, m],
                right: upstream.shape().to_vec(),
            }
            .into());
        }
        let mut x_t = vec![T::zero(); d * n];
        transpose_into(n, d, x.data(), &mut x_t);
        gemm(d, m, n, &x_t, upstream.data(), self.weight.grad.data_mut(), true);
        let db = self.bias.grad.data_mut();
        for row in upstream.data().chunks(m) {
            for (g, &u) in db.iter_mut().zip(row) {
                *g = *g + u;
            }
        }
        if !need_dx {
            return Ok(None);
        }
        let mut w_t = vec![T::zero(); m * d];
        transpose_into(d, m, self.weight.value.data(), &mut w_t);
        let mut dx = vec![T::zero(); n * d];
        gemm(n, d, m, upstream.data(), &w_t, &mut dx, false);
        Ok(Some(Tensor::new(&[n, d], dx)?))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Element>(&self) -> Dense<U> {
        Dense {
            in_features: self.in_features,
            out_features: self.out_features,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            cache: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = Dense::<f32>::new(4, 4).unwrap();
        layer.weight.value = Tensor::identity(4).unwrap();
        let x = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
        assert_eq!(layer.infer(&x).unwrap(), x);
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut layer = Dense::<f32>::new(5, 2).unwrap();
        layer.weight.value = Tensor::full(&[5, 2], 0.3).unwrap();
        layer.bias.value = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        let y = layer.infer(&Tensor::zeros(&[3, 5]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.5, -0.5, 1.5, -0.5, 1.5, -0.5]);
    }

    #[test]
    fn backward_matches_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = Dense::<f64>::new(3, 2).unwrap();
        layer.weight.value = Tensor::from_fn(&[3, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        let x = Tensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0)).unwrap();
        let up = Tensor::from_fn(&[4, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        layer.forward(&x).unwrap();
        let dx = layer.backward(&up, true).unwrap().unwrap();
        let want_dx = up.matmul(&layer.weight.value.transpose2d().unwrap()).unwrap();
        let want_dw = x.transpose2d().unwrap().matmul(&up).unwrap();
        assert!(dx.max_rel_diff(&want_dx).unwrap() < 1e-12);
        assert!(layer.weight.grad.max_rel_diff(&want_dw).unwrap() < 1e-12);
        let col_sum = up.reduce(crate::tensor::Reduction::Sum, 0).unwrap();
        assert!(layer.bias.grad.max_rel_diff(&col_sum).unwrap() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let layer = Dense::<f32>::new(5, 2).unwrap();
        assert!(layer.infer(&Tensor::zeros(&[1, 4]).unwrap()).is_err());
    }
}

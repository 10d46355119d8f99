use rayon::prelude::*;

use super::{NnError, Result};
use crate::tensor::{Element, Tensor, TensorError};

/// Max pooling over square windows. Padded positions never win a window.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    size: usize,
    stride: usize,
    pad: usize,
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
struct PoolCache {
    input_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Flat input index of each output's winning element.
    winners: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        Self::padded(size, stride, 0)
    }

    /// Pooling with `pad` implicit border cells on every side.
    pub fn padded(size: usize, stride: usize, pad: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(NnError::Input("pool size and stride must be at least 1".into()));
        }
        if pad >= size {
            return Err(NnError::Input("pool padding must be smaller than the window".into()));
        }
        Ok(MaxPool2d {
            size,
            stride,
            pad,
            cache: None,
        })
    }

    fn dims(&self, shape: &[usize]) -> Result<[usize; 6]> {
        let &[n, c, h, w] = shape else {
            return Err(NnError::Input(format!("max_pool2d expects [N,C,H,W], got {shape:?}")));
        };
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if self.size > ph || self.size > pw {
            return Err(NnError::Input(format!(
                "pool window {} larger than input {h}x{w}",
                self.size
            )));
        }
        Ok([n, c, h, w, (ph - self.size) / self.stride + 1, (pw - self.size) / self.stride + 1])
    }

    fn run<T: Element>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let [n, c, h, w, ho, wo] = self.dims(x.shape())?;
        let data = x.data();
        let per = ho * wo;
        let mut out = vec![T::zero(); n * c * per];
        let mut winners = vec![0usize; n * c * per];
        // Clipped window bounds along one axis for output index `o`.
        let span = |o: usize, len: usize| {
            let start = (o * self.stride) as isize - self.pad as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + self.size as isize) as usize).min(len);
            (lo, hi)
        };
        out.par_chunks_mut(per)
            .zip(winners.par_chunks_mut(per))
            .enumerate()
            .for_each(|(plane, (out_p, win_p))| {
                let base = plane * h * w;
                for oy in 0..ho {
                    let (y0, y1) = span(oy, h);
                    for ox in 0..wo {
                        let (x0, x1) = span(ox, w);
                        let mut at = base + y0 * w + x0;
                        let mut best = data[at];
                        for iy in y0..y1 {
                            let row = base + iy * w;
                            for (ix, &v) in data[row + x0..row + x1].iter().enumerate() {
                                // Strict comparison keeps the first maximum in row-major scan order.
                                if v > best {
                                    best = v;
                                    at = row + x0 + ix;
                                }
                            }
                        }
                        out_p[oy * wo + ox] = best;
                        win_p[oy * wo + ox] = at;
                    }
                }
            });
        Ok((Tensor::new(&[n, c, ho, wo], out)?, winners))
    }

    pub fn infer<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn forward<T: Element>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, winners) = self.run(x)?;
        self.cache = Some(PoolCache {
            input_shape: x.shape().to_vec(),
            out_shape: y.shape().to_vec(),
            winners,
        });
        Ok(y)
    }

    /// Routes each upstream value to its window's winning input position.
    pub fn backward<T: Element>(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::NoForwardCache)?;
        if upstream.shape() != cache.out_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2d backward",
                left: cache.out_shape.clone(),
                right: upstream.shape().to_vec(),
            }
            .into());
        }
        let mut dx = Tensor::zeros(&cache.input_shape)?;
        let d = dx.data_mut();
        for (&at, &g) in cache.winners.iter().zip(upstream.data()) {
            d[at] = d[at] + g;
        }
        Ok(dx)
    }

    /// Picks each window's value at the winner recorded by the last training
    /// forward pass.
    pub fn replay<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::NoForwardCache)?;
        if x.shape() != cache.input_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2d replay",
                left: cache.input_shape.clone(),
                right: x.shape().to_vec(),
            }
            .into());
        }
        let data = cache.winners.iter().map(|&at| x.data()[at]).collect();
        Ok(Tensor::new(&cache.out_shape, data)?)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Flat input index of each window's winner from the last training
    /// forward pass.
    pub fn winners(&self) -> Option<&[usize]> {
        self.cache.as_ref().map(|c| c.winners.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_maximum() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(MaxPool2d::new(2, 2).unwrap().infer(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_input_routes_to_first_cell() {
        let x = Tensor::full(&[1, 1, 4, 4], 3.0f32).unwrap();
        let mut pool = MaxPool2d::new(2, 2).unwrap();
        let y = pool.forward(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        let dx = pool.backward(&Tensor::full(&[1, 1, 2, 2], 1.0f32).unwrap()).unwrap();
        let expect = [
            1., 0., 1., 0., //
            0., 0., 0., 0., //
            1., 0., 1., 0., //
            0., 0., 0., 0.,
        ];
        assert_eq!(dx.data(), &expect);
    }

    #[test]
    fn matches_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::<f32>::from_fn(&[1, 2, 6, 6], |_| rng.random_range(-1.0..1.0)).unwrap();
        let y = MaxPool2d::new(2, 2).unwrap().infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[(c * 6 + oy * 2 + dy) * 6 + ox * 2 + dx]);
                        }
                    }
                    assert_eq!(y.data()[(c * 3 + oy) * 3 + ox], m);
                }
            }
        }
    }

    #[test]
    fn floor_output_and_mass_conservation() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::<f32>::from_fn(&[2, 3, 9, 7], |_| rng.random_range(-1.0..1.0)).unwrap();
        let mut pool = MaxPool2d::new(2, 2).unwrap();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 3]);
        let up = Tensor::<f32>::from_fn(y.shape(), |_| rng.random_range(-1.0..1.0)).unwrap();
        let dx = pool.backward(&up).unwrap();
        let (a, b): (f32, f32) = (dx.data().iter().sum(), up.data().iter().sum());
        assert!((a - b).abs() <= 1e-5);
    }

    #[test]
    fn same_padded_pool_keeps_size() {
        let x = Tensor::full(&[1, 1, 5, 5], -2.0f32).unwrap();
        let y = MaxPool2d::padded(3, 1, 1).unwrap().infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        assert!(y.data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]).unwrap();
        assert!(MaxPool2d::new(2, 2).unwrap().infer(&x).is_err());
    }
}

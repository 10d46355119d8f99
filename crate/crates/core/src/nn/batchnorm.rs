//! Per-channel batch normalization with running statistics.
//!
//! Input is `[N, C, ...]`; statistics are taken over every axis except the
//! channel axis. Running statistics follow
//! `running = (1 − momentum)·running + momentum·batch`, with the biased batch
//! variance, so `momentum` is the weight given to the newest batch.

use super::{Mode, NnError, Param, Result};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T: Element = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Element> BatchStats<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) || !(epsilon > 0.0) {
            return Err(NnError::Input("batch_norm needs momentum in (0,1) and epsilon > 0".into()));
        }
        Ok(BatchStats {
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: T::from_f64_lossy(momentum),
            epsilon: T::from_f64_lossy(epsilon),
        })
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Element = f32> {
    channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: BatchStats<T>,
    cache: Option<BnCache<T>>,
}

/// (batch, channels, spatial) for an `[N, C, ...]` shape.
fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(NnError::Input(format!(
            "batch_norm over {channels} channels got input {shape:?}"
        )));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if channels == 0 {
            return Err(NnError::Input("batch_norm channels must be at least 1".into()));
        }
        Ok(BatchNorm {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())?),
            beta: Param::new(Tensor::zeros(&[channels])?),
            stats: BatchStats::new(channels, momentum, epsilon)?,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn normalize(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> Result<(Tensor<T>, Vec<T>)> {
        let (n, spatial) = layout(x.shape(), self.channels)?;
        let (gamma, beta) = (self.gamma.value.data(), self.beta.value.data());
        let mut y = vec![T::zero(); x.len()];
        let mut x_hat = vec![T::zero(); x.len()];
        for s in 0..n {
            for c in 0..self.channels {
                let base = (s * self.channels + c) * spatial;
                for i in base..base + spatial {
                    let h = (x.data()[i] - mean[c]) * inv_std[c];
                    x_hat[i] = h;
                    y[i] = gamma[c] * h + beta[c];
                }
            }
        }
        Ok((Tensor::new(x.shape(), y)?, x_hat))
    }

    fn running_inv_std(&self) -> Vec<T> {
        self.inv_std(self.stats.running_var.data())
    }

    /// Inference-mode transform; a pure function of input and running stats.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .normalize(x, self.stats.running_mean.data(), &self.running_inv_std())?
            .0)
    }

    /// Per-channel mean and biased variance of a batch.
    fn batch_stats(&self, x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
        let (n, spatial) = layout(x.shape(), self.channels)?;
        let population = n * spatial;
        if population < 2 {
            return Err(NnError::Input(
                "batch_norm in train mode needs more than one value per channel".into(),
            ));
        }
        let count = T::from_usize(population).expect("count fits");
        let mut mean = vec![T::zero(); self.channels];
        let mut var = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let mut sum = T::zero();
            for s in 0..n {
                let base = (s * self.channels + c) * spatial;
                for &v in &x.data()[base..base + spatial] {
                    sum = sum + v;
                }
            }
            mean[c] = sum / count;
            let mut sq = T::zero();
            for s in 0..n {
                let base = (s * self.channels + c) * spatial;
                for &v in &x.data()[base..base + spatial] {
                    let d = v - mean[c];
                    sq = sq + d * d;
                }
            }
            var[c] = sq / count;
        }
        Ok((mean, var))
    }

    fn inv_std(&self, var: &[T]) -> Vec<T> {
        var.iter().map(|&v| T::one() / (v + self.stats.epsilon).sqrt()).collect()
    }

    /// Train-mode normalization without touching running statistics or caches.
    pub fn replay(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (mean, var) = self.batch_stats(x)?;
        Ok(self.normalize(x, &mean, &self.inv_std(&var))?.0)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        layout(x.shape(), self.channels)?;
        let (mean, inv_std) = match mode {
            Mode::Infer => (self.stats.running_mean.data().to_vec(), self.running_inv_std()),
            Mode::Train => {
                let (mean, var) = self.batch_stats(x)?;
                let m = self.stats.momentum;
                let keep = T::one() - m;
                for c in 0..self.channels {
                    let rm = &mut self.stats.running_mean.data_mut()[c];
                    *rm = keep * *rm + m * mean[c];
                    let rv = &mut self.stats.running_var.data_mut()[c];
                    *rv = keep * *rv + m * var[c];
                }
                (mean, self.inv_std(&var))
            }
        };
        let (y, x_hat) = self.normalize(x, &mean, &inv_std)?;
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            shape: x.shape().to_vec(),
            mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or(NnError::NoForwardCache)?;
        if upstream.shape() != cache.shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm backward",
                left: cache.shape.clone(),
                right: upstream.shape().to_vec(),
            }
            .into());
        }
        let (n, spatial) = layout(&cache.shape, self.channels)?;
        let up = upstream.data();
        let gamma = self.gamma.value.data().to_vec();
        let count = T::from_usize(n * spatial).expect("count fits");
        let mut dx = vec![T::zero(); up.len()];
        for c in 0..self.channels {
            let idx = |s: usize| (s * self.channels + c) * spatial;
            let mut sum_up = T::zero();
            let mut sum_up_xhat = T::zero();
            for s in 0..n {
                let base = idx(s);
                for i in base..base + spatial {
                    sum_up = sum_up + up[i];
                    sum_up_xhat = sum_up_xhat + up[i] * cache.x_hat[i];
                }
            }
            let dg = &mut self.gamma.grad.data_mut()[c];
            *dg = *dg + sum_up_xhat;
            let db = &mut self.beta.grad.data_mut()[c];
            *db = *db + sum_up;

            let scale = gamma[c] * cache.inv_std[c];
            for s in 0..n {
                let base = idx(s);
                for i in base..base + spatial {
                    dx[i] = match cache.mode {
                        Mode::Infer => scale * up[i],
                        // dx = γ·σ⁻¹/M · (M·up − Σup − x̂·Σ(up·x̂))
                        Mode::Train => {
                            scale / count * (count * up[i] - sum_up - cache.x_hat[i] * sum_up_xhat)
                        }
                    };
                }
            }
        }
        Ok(Tensor::new(&cache.shape, dx)?)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn cast<U: Element>(&self) -> BatchNorm<U> {
        BatchNorm {
            channels: self.channels,
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            stats: BatchStats {
                running_mean: self.stats.running_mean.cast(),
                running_var: self.stats.running_var.cast(),
                momentum: U::from_f64_lossy(self.stats.momentum.to_f64_lossy()),
                epsilon: U::from_f64_lossy(self.stats.epsilon.to_f64_lossy()),
            },
            cache: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DEFAULT_BN_MOMENTUM;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-2.0..3.0)).unwrap()
    }

    #[test]
    fn constant_channels_map_to_beta() {
        let mut bn = BatchNorm::<f32>::new(2, 1e-3, 0.99).unwrap();
        bn.beta.value = Tensor::new(&[2], vec![0.25, -1.0]).unwrap();
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| if (i / 4) % 2 == 0 { 5.0 } else { -7.0 }).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, if (i / 4) % 2 == 0 { 0.25 } else { -1.0 });
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let mut bn = BatchNorm::<f32>::new(3, 1e-3, 0.99).unwrap();
        let y = bn.forward(&random(&[16, 3, 4, 4], 1), Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..16)
                .flat_map(|s| y.data()[(s * 3 + c) * 16..(s * 3 + c + 1) * 16].to_vec())
                .map(|v| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-3);
            assert!((var - 1.0).abs() <= 1e-3, "{var}");
        }
    }

    #[test]
    fn running_stats_follow_geometric_recurrence() {
        let x = random(&[6, 2], 3).cast::<f64>();
        let col = |c: usize| (0..6).map(|s| x.data()[s * 2 + c]).collect::<Vec<_>>();
        let mean: Vec<f64> = (0..2).map(|c| col(c).iter().sum::<f64>() / 6.0).collect();
        let var: Vec<f64> = (0..2)
            .map(|c| col(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / 6.0)
            .collect();
        for momentum in [0.9, DEFAULT_BN_MOMENTUM] {
            let mut bn = BatchNorm::<f64>::new(2, 1e-3, momentum).unwrap();
            for k in 1..=7 {
                bn.forward(&x, Mode::Train).unwrap();
                let decay = (1.0f64 - momentum).powi(k);
                for c in 0..2 {
                    let m_k = (1.0 - decay) * mean[c];
                    let v_k = decay + (1.0 - decay) * var[c];
                    assert!((bn.stats.running_mean.data()[c] - m_k).abs() < 1e-12);
                    assert!((bn.stats.running_var.data()[c] - v_k).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn infer_is_pure() {
        let mut bn = BatchNorm::<f32>::new(3, 1e-3, 0.99).unwrap();
        bn.forward(&random(&[8, 3], 4), Mode::Train).unwrap();
        let before = bn.stats.clone();
        let x = random(&[5, 3], 5);
        let a = bn.infer(&x).unwrap();
        let b = bn.forward(&x, Mode::Infer).unwrap();
        assert_eq!(a, b);
        assert_eq!(bn.stats, before);
    }

    #[test]
    fn single_value_population_is_rejected_in_train_mode() {
        let mut bn = BatchNorm::<f32>::new(4, 1e-3, 0.99).unwrap();
        assert!(bn.forward(&Tensor::zeros(&[1, 4]).unwrap(), Mode::Train).is_err());
        assert!(bn.forward(&Tensor::zeros(&[1, 4]).unwrap(), Mode::Infer).is_ok());
    }
}

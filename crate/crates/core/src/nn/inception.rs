//! Inception block: parallel 1×1, 3×3 and 5×5 convolutions plus a pooled
//! 1×1 branch, each followed by ReLU, concatenated along channels in the
//! order (1×1, 3×3, 5×5, pool).

use super::{Conv2d, MaxPool2d, Mode, NnError, Padding, Param, Relu, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct Inception<T: Element = f32> {
    pub conv1: Conv2d<T>,
    pub conv3: Conv2d<T>,
    pub conv5: Conv2d<T>,
    pub pool_proj: Conv2d<T>,
    pool: MaxPool2d,
    relus: [Relu; 4],
}

impl<T: Element> Inception<T> {
    pub fn new(in_channels: usize, b1: usize, b3: usize, b5: usize, bpool: usize) -> Result<Self> {
        Ok(Inception {
            conv1: Conv2d::new(in_channels, b1, [1, 1], 1, Padding::Same)?,
            conv3: Conv2d::new(in_channels, b3, [3, 3], 1, Padding::Same)?,
            conv5: Conv2d::new(in_channels, b5, [5, 5], 1, Padding::Same)?,
            pool_proj: Conv2d::new(in_channels, bpool, [1, 1], 1, Padding::Same)?,
            pool: MaxPool2d::padded(3, 1, 1)?,
            relus: Default::default(),
        })
    }

    pub fn branch_widths(&self) -> [usize; 4] {
        [
            self.conv1.out_channels(),
            self.conv3.out_channels(),
            self.conv5.out_channels(),
            self.pool_proj.out_channels(),
        ]
    }

    pub fn convs(&self) -> [&Conv2d<T>; 4] {
        [&self.conv1, &self.conv3, &self.conv5, &self.pool_proj]
    }

    pub fn convs_mut(&mut self) -> [&mut Conv2d<T>; 4] {
        [&mut self.conv1, &mut self.conv3, &mut self.conv5, &mut self.pool_proj]
    }

    fn concat(branches: [Tensor<T>; 4]) -> Result<Tensor<T>> {
        let base = branches[0].shape();
        let (n, h, w) = (base[0], base[2], base[3]);
        for b in &branches {
            if b.shape()[0] != n || b.shape()[2] != h || b.shape()[3] != w {
                return Err(NnError::Input(format!(
                    "inception branch output {:?} does not match {:?} spatially",
                    b.shape(),
                    base
                )));
            }
        }
        let channels: usize = branches.iter().map(|b| b.shape()[1]).sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for s in 0..n {
            for b in &branches {
                let c = b.shape()[1];
                out.extend_from_slice(&b.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        Ok(Tensor::new(&[n, channels, h, w], out)?)
    }

    /// Branch outputs before concatenation, in branch order.
    pub fn branch_outputs(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let pooled = self.pool.infer(x)?;
        Ok([
            self.conv1.infer(x)?.relu(),
            self.conv3.infer(x)?.relu(),
            self.conv5.infer(x)?.relu(),
            self.pool_proj.infer(&pooled)?.relu(),
        ])
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::concat(self.branch_outputs(x)?)
    }

    /// Forward pass with the pool winners and ReLU masks of the last training
    /// pass held fixed.
    pub fn replay(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = self.pool.replay(x)?;
        let [r1, r3, r5, rp] = &self.relus;
        Self::concat([
            r1.replay(&self.conv1.infer(x)?)?,
            r3.replay(&self.conv3.infer(x)?)?,
            r5.replay(&self.conv5.infer(x)?)?,
            rp.replay(&self.pool_proj.infer(&pooled)?)?,
        ])
    }

    pub fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        let pooled = self.pool.forward(x)?;
        let [r1, r3, r5, rp] = &mut self.relus;
        let b1 = r1.forward(&self.conv1.forward(x)?);
        let b3 = r3.forward(&self.conv3.forward(x)?);
        let b5 = r5.forward(&self.conv5.forward(x)?);
        let bp = rp.forward(&self.pool_proj.forward(&pooled)?);
        Self::concat([b1, b3, b5, bp])
    }

    pub fn backward(&mut self, upstream: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let &[n, channels, h, w] = upstream.shape() else {
            return Err(NnError::Input(format!(
                "inception backward expects [N,C,H,W], got {:?}",
                upstream.shape()
            )));
        };
        let widths = self.branch_widths();
        if widths.iter().sum::<usize>() != channels {
            return Err(NnError::Input(format!(
                "inception backward got {channels} channels, branches sum to {}",
                widths.iter().sum::<usize>()
            )));
        }
        let plane = h * w;
        let mut offset = 0;
        let mut slices = Vec::with_capacity(4);
        for &c in &widths {
            let mut part = Vec::with_capacity(n * c * plane);
            for s in 0..n {
                let start = (s * channels + offset) * plane;
                part.extend_from_slice(&upstream.data()[start..start + c * plane]);
            }
            slices.push(Tensor::new(&[n, c, h, w], part)?);
            offset += c;
        }
        let [r1, r3, r5, rp] = &mut self.relus;
        let d1 = self.conv1.backward(&r1.backward(&slices[0])?, need_dx)?;
        let d3 = self.conv3.backward(&r3.backward(&slices[1])?, need_dx)?;
        let d5 = self.conv5.backward(&r5.backward(&slices[2])?, need_dx)?;
        // The pool branch always needs its conv input gradient to reach the pool.
        let dp = self.pool_proj.backward(&rp.backward(&slices[3])?, need_dx)?;
        if !need_dx {
            return Ok(None);
        }
        let dpool = self.pool.backward(&dp.expect("requested"))?;
        let mut dx = d1.expect("requested");
        for part in [d3, d5] {
            dx = dx.add(&part.expect("requested"))?;
        }
        Ok(Some(dx.add(&dpool)?))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.convs_mut().into_iter().flat_map(|c| c.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.convs().into_iter().flat_map(|c| c.params()).collect()
    }

    pub(crate) fn switch_pattern(&self, out: &mut Vec<usize>) {
        out.extend(self.pool.winners().unwrap_or_default());
        for r in &self.relus {
            out.extend(r.mask().unwrap_or_default().iter().map(|&on| on as usize));
        }
    }

    pub fn clear_cache(&mut self) {
        for c in self.convs_mut() {
            c.clear_cache();
        }
        self.pool.clear_cache();
        self.relus.iter_mut().for_each(Relu::clear_cache);
    }

    pub fn cast<U: Element>(&self) -> Inception<U> {
        Inception {
            conv1: self.conv1.cast(),
            conv3: self.conv3.cast(),
            conv5: self.conv5.cast(),
            pool_proj: self.pool_proj.cast(),
            pool: MaxPool2d::padded(3, 1, 1).expect("fixed geometry"),
            relus: Default::default(),
        }
    }
}

//! 2-D convolution (cross-correlation) lowered to patch matrices and GEMM.

use rayon::prelude::*;

use super::{same_pad, NnError, Padding, Param, Result};
use crate::tensor::gemm::{gemm, transpose_into};
use crate::tensor::{Element, Tensor, TensorError};

/// Samples processed per parallel round in backward. Fixed, so the order in
/// which per-sample weight gradients are summed never depends on thread count.
const BACKWARD_CHUNK: usize = 8;

/// Output length along one axis: `floor((len + 2·pad − kernel) / stride) + 1`.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if kernel > padded {
        return Err(NnError::Input(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T: Element = f32> {
    in_channels: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
    /// `[F, C, kh, kw]`
    pub weight: Param<T>,
    /// `[F]`
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Element> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [kh, kw] = kernel;
        if in_channels == 0 || out_channels == 0 || kh == 0 || kw == 0 || stride == 0 {
            return Err(NnError::Input("conv2d dimensions must be at least 1".into()));
        }
        let (pad_h, pad_w) = same_pad(padding, kh, kw).map_err(NnError::Input)?;
        Ok(Conv2d {
            in_channels,
            out_channels,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            weight: Param::new(Tensor::zeros(&[out_channels, in_channels, kh, kw])?),
            bias: Param::new(Tensor::zeros(&[out_channels])?),
            cache: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Fan-in and fan-out used by the initializers.
    pub fn fans(&self) -> (usize, usize) {
        let area = self.kh * self.kw;
        (self.in_channels * area, self.out_channels * area)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        let &[batch, channels, height, width] = x.shape() else {
            return Err(NnError::Input(format!("conv2d expects [N,C,H,W], got {:?}", x.shape())));
        };
        if channels != self.in_channels {
            return Err(NnError::Input(format!(
                "conv2d expects {} input channels, got {channels}",
                self.in_channels
            )));
        }
        Ok(Geometry {
            batch,
            channels,
            height,
            width,
            out_h: conv_output_len(height, self.kh, self.stride, self.pad_h)?,
            out_w: conv_output_len(width, self.kw, self.stride, self.pad_w)?,
        })
    }

    /// Range of output columns whose input column `ox·stride + kx − pad`
    /// lands inside the image.
    fn valid_cols(&self, g: &Geometry, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad_w.saturating_sub(kx).div_ceil(s);
        let hi = if g.width + self.pad_w > kx {
            ((g.width + self.pad_w - kx - 1) / s + 1).min(g.out_w)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unrolls one sample `[C,H,W]` into a `[C·kh·kw, positions]` patch
    /// matrix; row `(c, ky, kx)` holds that kernel tap's input for every
    /// output position.
    fn im2col(&self, g: &Geometry, x: &[T], cols: &mut [T]) {
        let p = g.positions();
        let mut rows = cols.chunks_mut(p);
        for c in 0..g.channels {
            let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = rows.next().expect("patch row");
                    let (lo, hi) = self.valid_cols(g, kx);
                    for (oy, seg) in row.chunks_mut(g.out_w).enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy as usize >= g.height || lo >= hi {
                            seg.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        seg[..lo].iter_mut().for_each(|v| *v = T::zero());
                        seg[hi..].iter_mut().for_each(|v| *v = T::zero());
                        let first = lo * self.stride + kx - self.pad_w;
                        if self.stride == 1 {
                            seg[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (i, v) in seg[lo..hi].iter_mut().enumerate() {
                                *v = src[first + i * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `[C·kh·kw, positions]` gradient back onto one sample's
    /// input grid.
    fn col2im(&self, g: &Geometry, dcols: &[T], dx: &mut [T]) {
        let p = g.positions();
        let mut rows = dcols.chunks(p);
        for c in 0..g.channels {
            let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = rows.next().expect("patch row");
                    let (lo, hi) = self.valid_cols(g, kx);
                    if lo >= hi {
                        continue;
                    }
                    for (oy, seg) in row.chunks(g.out_w).enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad_h as isize;
                        if iy < 0 || iy as usize >= g.height {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let first = lo * self.stride + kx - self.pad_w;
                        for (i, &v) in seg[lo..hi].iter().enumerate() {
                            let at = first + i * self.stride;
                            dst[at] = dst[at] + v;
                        }
                    }
                }
            }
        }
    }

    /// Forward pass without caching; safe to call concurrently.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let (k, f, p) = (self.patch_len(), self.out_channels, g.positions());
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();
        let mut out = vec![T::zero(); g.batch * f * p];
        out.par_chunks_mut(f * p)
            .zip(x.data().par_chunks(g.in_len()))
            .for_each(|(out_n, x_n)| {
                let mut cols = vec![T::zero(); k * p];
                self.im2col(&g, x_n, &mut cols);
                gemm(f, p, k, weight, &cols, out_n, false);
                for (fi, chunk) in out_n.chunks_mut(p).enumerate() {
                    let b = bias[fi];
                    chunk.iter_mut().for_each(|v| *v = *v + b);
                }
            });
        Ok(Tensor::new(&[g.batch, f, g.out_h, g.out_w], out)?)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, upstream: &Tensor<T>, need_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self.cache.as_ref().ok_or(NnError::NoForwardCache)?;
        let g = self.geometry(x)?;
        let (k, f, p) = (self.patch_len(), self.out_channels, g.positions());
        let expected = [g.batch, f, g.out_h, g.out_w];
        if upstream.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d backward",
                left: expected.to_vec(),
                right: upstream.shape().to_vec(),
            }
            .into());
        }
        let mut w_t = vec![T::zero(); k * f];
        transpose_into(f, k, self.weight.value.data(), &mut w_t);
        let mut dx = if need_dx {
            vec![T::zero(); g.batch * g.in_len()]
        } else {
            Vec::new()
        };
        let mut dw_total = vec![T::zero(); f * k];
        let mut db_total = vec![T::zero(); f];

        for start in (0..g.batch).step_by(BACKWARD_CHUNK) {
            let end = (start + BACKWARD_CHUNK).min(g.batch);
            let partials: Vec<_> = (start..end)
                .into_par_iter()
                .map(|s| {
                    let x_n = &x.data()[s * g.in_len()..(s + 1) * g.in_len()];
                    let up_n = &upstream.data()[s * f * p..(s + 1) * f * p];
                    let mut cols = vec![T::zero(); k * p];
                    self.im2col(&g, x_n, &mut cols);
                    // dWᵀ[K,F] = cols[K,P] · upᵀ[P,F]
                    let mut up_t = vec![T::zero(); p * f];
                    transpose_into(f, p, up_n, &mut up_t);
                    let mut dw_t = vec![T::zero(); k * f];
                    gemm(k, f, p, &cols, &up_t, &mut dw_t, false);
                    let mut dw = vec![T::zero(); f * k];
                    transpose_into(k, f, &dw_t, &mut dw);
                    let db: Vec<T> = up_n.chunks(p).map(|c| c.iter().fold(T::zero(), |a, &v| a + v)).collect();
                    let dx_n = need_dx.then(|| {
                        // dcols[K,P] = Wᵀ[K,F] · up[F,P]
                        gemm(k, p, f, &w_t, up_n, &mut cols, false);
                        let mut dx_n = vec![T::zero(); g.in_len()];
                        self.col2im(&g, &cols, &mut dx_n);
                        dx_n
                    });
                    (dw, db, dx_n)
                })
                .collect();
            for (offset, (dw, db, dx_n)) in partials.into_iter().enumerate() {
                for (acc, v) in dw_total.iter_mut().zip(dw) {
                    *acc = *acc + v;
                }
                for (acc, v) in db_total.iter_mut().zip(db) {
                    *acc = *acc + v;
                }
                if let Some(dx_n) = dx_n {
                    let s = start + offset;
                    dx[s * g.in_len()..(s + 1) * g.in_len()].copy_from_slice(&dx_n);
                }
            }
        }
        for (g, v) in self.weight.grad.data_mut().iter_mut().zip(dw_total) {
            *g = *g + v;
        }
        for (g, v) in self.bias.grad.data_mut().iter_mut().zip(db_total) {
            *g = *g + v;
        }
        if need_dx {
            Ok(Some(Tensor::new(&[g.batch, g.channels, g.height, g.width], dx)?))
        } else {
            Ok(None)
        }
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

    pub fn cast<U: Element>(&self) -> Conv2d<U> {
        Conv2d {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kh: self.kh,
            kw: self.kw,
            stride: self.stride,
            pad_h: self.pad_h,
            pad_w: self.pad_w,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            cache: None,
        }
    }
}

//! Dense row-major tensors and the numeric primitives the layers are built on.

pub mod gemm;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumCast};
use thiserror::Error;

/// Scalar types a [`Tensor`] can hold.
///
/// Production compute runs in `f32`; `f64` exists for the widened
/// gradient-check harness. Both have AVX2 matrix kernels.
pub trait Element:
    Float + FromPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    #[doc(hidden)]
    fn gemm_kernel(
        m: usize,
        n: usize,
        k: usize,
        a: &[Self],
        b: &[Self],
        c: &mut [Self],
        accumulate: bool,
    ) {
        gemm::gemm_portable(m, n, k, a, b, c, accumulate);
    }

    fn from_f64_lossy(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("float conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        <f64 as NumCast>::from(self).expect("float conversion")
    }
}

impl Element for f32 {
    fn gemm_kernel(
        m: usize,
        n: usize,
        k: usize,
        a: &[f32],
        b: &[f32],
        c: &mut [f32],
        accumulate: bool,
    ) {
        gemm::sgemm(m, n, k, a, b, c, accumulate);
    }
}

impl Element for f64 {
    fn gemm_kernel(
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        b: &[f64],
        c: &mut [f64],
        accumulate: bool,
    ) {
        gemm::dgemm(m, n, k, a, b, c, accumulate);
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape {
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("element count mismatch: shape {shape:?} holds {expected} elements, got {actual}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("{op}: domain error, {detail}")]
    Domain { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array, row-major (last axis fastest).
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... {} more", self.data.len() - SHOWN)?;
        }
        write!(f, "]")
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1",
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: "every dimension must be at least 1",
        });
    }
    Ok(())
}

/// Binary and unary pointwise operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Exp,
    Log,
}

/// Right-hand side of an [`ElementwiseOp`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T: Element> {
    None,
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    /// Index of the maximum; ties resolve to the lowest index.
    Argmax,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        gemm::gemm(m, n, k, &self.data, &other.data, &mut out, false);
        Tensor::new(&[m, n], out)
    }

    fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn ln(&self) -> Result<Self> {
        if let Some(bad) = self.data.iter().find(|v| !(**v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(|v| v.ln()))
    }

    /// Dispatches a pointwise operation. Binary ops accept a same-shape
    /// tensor or a scalar; `Scale` takes a scalar; unary ops take no operand.
    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_, T>) -> Result<Self> {
        use ElementwiseOp::*;
        match (op, rhs) {
            (Add, Operand::Tensor(b)) => self.add(b),
            (Sub, Operand::Tensor(b)) => self.sub(b),
            (Mul, Operand::Tensor(b)) => self.mul(b),
            (Add, Operand::Scalar(s)) => Ok(self.add_scalar(s)),
            (Sub, Operand::Scalar(s)) => Ok(self.add_scalar(-s)),
            (Mul | Scale, Operand::Scalar(s)) => Ok(self.scale(s)),
            (Relu, Operand::None) => Ok(self.relu()),
            (Exp, Operand::None) => Ok(self.exp()),
            (Log, Operand::None) => self.ln(),
            (op, Operand::Tensor(b)) => Err(TensorError::ShapeMismatch {
                op: op_name(op),
                left: self.shape.clone(),
                right: b.shape.clone(),
            }),
            (op, _) => Err(TensorError::Domain {
                op: op_name(op),
                detail: "operand kind does not match operation".into(),
            }),
        }
    }

    /// Reduces along `axis`. The result has rank `rank − 1`; reducing a rank-1
    /// tensor yields shape `[1]`.
    pub fn reduce(&self, op: Reduction, axis: usize) -> Result<Self> {
        let rank = self.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| self.data[(o * len + t) * inner + i];
                let v = match op {
                    Reduction::Sum | Reduction::Mean => {
                        let mut s = T::zero();
                        for t in 0..len {
                            s = s + at(t);
                        }
                        if op == Reduction::Mean {
                            s / T::from_usize(len).expect("length fits")
                        } else {
                            s
                        }
                    }
                    Reduction::Max => (1..len).fold(at(0), |m, t| if at(t) > m { at(t) } else { m }),
                    Reduction::Argmax => {
                        let mut best = 0;
                        for t in 1..len {
                            if at(t) > at(best) {
                                best = t;
                            }
                        }
                        T::from_usize(best).expect("index fits")
                    }
                };
                out.push(v);
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(&shape, out)
    }

    /// Row-wise argmax of a rank-2 tensor; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Result<Vec<usize>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "argmax_rows needs a rank-2 tensor",
            });
        }
        let cols = self.shape[1];
        Ok(self.data.chunks(cols).map(argmax).collect())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Consuming reshape; no copy.
    pub fn into_shape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ElementCount {
                shape: shape.to_vec(),
                expected,
                actual: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose2d needs a rank-2 tensor",
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![T::zero(); r * c];
        gemm::transpose_into(r, c, &self.data, &mut out);
        Tensor::new(&[c, r], out)
    }

    /// Largest absolute difference relative to the larger magnitude, elementwise,
    /// with magnitudes below one treated as one.
    pub fn max_rel_diff(&self, other: &Tensor<T>) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| {
                    let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
                    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
                })
                .fold(0.0, f64::max),
        )
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn op_name(op: ElementwiseOp) -> &'static str {
    match op {
        ElementwiseOp::Add => "add",
        ElementwiseOp::Sub => "sub",
        ElementwiseOp::Mul => "mul",
        ElementwiseOp::Scale => "scale",
        ElementwiseOp::Relu => "relu",
        ElementwiseOp::Exp => "exp",
        ElementwiseOp::Log => "log",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::ElementCount { expected: 6, actual: 5, .. })
        ));
    }

    #[test]
    fn identity_matmul() {
        let a = random(&[3, 3], 1);
        let i = Tensor::identity(3).unwrap();
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn zero_matmul() {
        let z = Tensor::<f32>::zeros(&[2, 4]).unwrap();
        let b = random(&[4, 5], 2);
        let c = z.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 4], 3);
        let b = random(&[4, 3], 4);
        let c = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for t in 0..4 {
                    s += a.data()[i * 4 + t] as f64 * b.data()[t * 3 + j] as f64;
                }
                let got = c.data()[i * 3 + j] as f64;
                assert!((got - s).abs() <= 1e-5 * s.abs().max(1.0), "{got} vs {s}");
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = random(&[2, 3], 1).matmul(&random(&[4, 2], 2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_cases() {
        let x = Tensor::new(&[3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let a = random(&[2, 3], 5);
        let z = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(a.elementwise(ElementwiseOp::Add, Operand::Tensor(&z)).unwrap(), a);
        assert!(x.ln().is_err());
        assert!(a.add(&random(&[3, 2], 1)).is_err());
        assert_eq!(
            x.elementwise(ElementwiseOp::Scale, Operand::Scalar(2.0)).unwrap().data(),
            &[-2.0, 0.0, 4.0]
        );
    }

    #[test]
    fn exp_log_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::from_fn(&[4, 7], |_| rng.random_range(0.01..5.0)).unwrap();
        let back = a.exp().ln().unwrap();
        assert!(back.max_rel_diff(&a).unwrap() <= 1e-5);
    }

    #[test]
    fn reductions() {
        let c = Tensor::full(&[3, 4], 2.5f32).unwrap();
        assert!(c.reduce(Reduction::Mean, 1).unwrap().data().iter().all(|&v| v == 2.5));
        let p = Tensor::new(&[3], vec![0.2f32, 0.5, 0.3]).unwrap();
        assert_eq!(p.reduce(Reduction::Argmax, 0).unwrap().data(), &[1.0]);
        let tie = Tensor::new(&[1, 3], vec![0.4f32, 0.4, 0.2]).unwrap();
        assert_eq!(tie.argmax_rows().unwrap(), vec![0]);

        let r = random(&[4, 3], 6);
        let s = r.reduce(Reduction::Sum, 0).unwrap();
        assert_eq!(s.shape(), &[3]);
        for j in 0..3 {
            let mut acc = 0.0f32;
            for i in 0..4 {
                acc += r.data()[i * 3 + j];
            }
            assert_eq!(s.data()[j], acc);
        }
        assert!(matches!(r.reduce(Reduction::Max, 2), Err(TensorError::AxisOutOfRange { .. })));
    }

    #[test]
    fn reshape_and_transpose() {
        let a = Tensor::new(&[2, 3], vec![1.0f32, 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(a.reshape(&[6]).unwrap().data(), a.data());
        assert_eq!(a.transpose2d().unwrap().data(), &[1.0, 4., 2., 5., 3., 6.]);
        assert!(a.reshape(&[4]).is_err());
        let big = Tensor::<f32>::zeros(&[1, 128, 9, 9]).unwrap();
        assert_eq!(big.reshape(&[1, 10368]).unwrap().shape(), &[1, 10368]);
    }

    #[test]
    fn operations_do_not_mutate_inputs() {
        let a = random(&[3, 3], 7);
        let b = random(&[3, 3], 8);
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.matmul(&b).unwrap();
        let _ = a.add(&b).unwrap();
        let _ = a.reduce(Reduction::Sum, 0).unwrap();
        let _ = a.transpose2d().unwrap();
        assert_eq!(a, a0);
        assert_eq!(b, b0);
    }

    proptest! {
        #[test]
        fn transpose_is_involution(r in 1usize..20, c in 1usize..20, seed in 0u64..1000) {
            let a = random(&[r, c], seed);
            prop_assert_eq!(a.transpose2d().unwrap().transpose2d().unwrap(), a);
        }

        #[test]
        fn identity_is_neutral_inside_products(m in 1usize..12, k in 1usize..12, n in 1usize..12, seed in 0u64..1000) {
            let a = random(&[m, k], seed);
            let b = random(&[k, n], seed + 1);
            let lhs = a.matmul(&Tensor::identity(k).unwrap()).unwrap().matmul(&b).unwrap();
            let rhs = a.matmul(&b).unwrap();
            prop_assert!(lhs.max_rel_diff(&rhs).unwrap() <= 1e-5);
        }

        #[test]
        fn matmul_is_deterministic(m in 1usize..40, k in 1usize..40, n in 1usize..40, seed in 0u64..1000) {
            let a = random(&[m, k], seed);
            let b = random(&[k, n], seed + 7);
            let x = a.matmul(&b).unwrap();
            let y = a.matmul(&b).unwrap();
            prop_assert_eq!(
                x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

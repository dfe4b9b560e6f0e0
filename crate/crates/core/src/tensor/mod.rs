//! Dense NCHW tensors and the elementwise building blocks of the network.
//!
//! Every differentiable operator in this crate follows the same contract:
//! a `*_vjp` constructor returns the forward value together with a
//! [`VjpFn`] that maps an output cotangent to the cotangents of the
//! differentiable inputs. Composition is explicit; there is no tape.

mod htf;
mod param;

use std::fmt::Debug;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Result};

pub use htf::{read_htf, read_htf_file, write_htf, write_htf_file, AnyTensor, DType};
pub use param::{Grads, Param, ParamKey, ParamStore};

/// Backward map of an operator: output cotangent in, input cotangents out.
pub type VjpFn<'a, T, G> = Box<dyn Fn(&Tensor<T>) -> Result<G> + 'a>;

/// Floating point element type. Implemented for `f32` (training) and
/// `f64` (gradient checks).
pub trait Scalar: Float + FromPrimitive + ToPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` for row-major-or-strided matrices.
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn from_f64_lossy(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn to_le_bytes_vec(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(strides.0 >= 0 && strides.1 >= 0, "negative gemm stride");
    let last = (rows - 1) * strides.0 as usize + (cols - 1) * strides.1 as usize;
    assert!(last < len, "gemm operand out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                check_gemm_extent(a.len(), m, k, a_strides);
                check_gemm_extent(b.len(), k, n, b_strides);
                check_gemm_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel lies inside the
                // checked extents above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            fn to_le_bytes_vec(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn from_le_slice(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("scalar width"))
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm);

/// Shorthand for converting literals into the working scalar type.
#[inline]
pub(crate) fn s<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Immutable rank-4 tensor `(N, C, H, W)`, row-major with `W` innermost.
///
/// Cloning is cheap: the buffer is reference counted and copied only on
/// mutation.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Arc<Vec<T>>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(shape_err!(
                "buffer of length {} does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                expected
            ));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: Arc::new(vec![value; shape.iter().product()]),
        }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn from_f64(shape: [usize; 4], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|arc| (*arc).clone())
    }

    /// Spatial plane size `H * W`.
    #[inline]
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, h, w] = self.shape;
        ((n * cs + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect()),
        }
    }

    pub fn reshape(&self, shape: [usize; 4]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self {
            shape: self.shape,
            data: Arc::new(
                self.data
                    .iter()
                    .zip(other.data.iter())
                    .map(|(&a, &b)| f(a, b))
                    .collect(),
            ),
        })
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len().max(1)).unwrap()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Mirror along the width axis.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.shape[3];
        Self::from_fn(self.shape, |n, c, y, x| self.at(n, c, y, w - 1 - x))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            let [pn, _, ph, pw] = p.shape;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err!("concat: {:?} incompatible with {:?}", p.shape, first.shape));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for ni in 0..n {
            for p in parts {
                let cs = p.shape[1] * plane;
                data.extend_from_slice(&p.data[ni * cs..(ni + 1) * cs]);
            }
        }
        Self::new([n, c_total, h, w], data)
    }

    /// Inverse of [`Tensor::concat_channels`]: split into consecutive
    /// channel groups of the given sizes.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        let [n, c, h, w] = self.shape;
        if sizes.iter().sum::<usize>() != c {
            return Err(shape_err!("split sizes {:?} do not sum to {c} channels", sizes));
        }
        let plane = h * w;
        let mut outs: Vec<Vec<T>> = sizes.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
        for ni in 0..n {
            let mut start = (ni * c) * plane;
            for (out, &k) in outs.iter_mut().zip(sizes) {
                out.extend_from_slice(&self.data[start..start + k * plane]);
                start += k * plane;
            }
        }
        outs.into_iter()
            .zip(sizes)
            .map(|(d, &k)| Self::new([n, k, h, w], d))
            .collect()
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(shape_err!("stack: {:?} vs {:?}", p.shape, first.shape));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::new([n, c, h, w], data)
    }

    /// Sample `n` of a batch as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let [bn, c, h, w] = self.shape;
        if n >= bn {
            return Err(shape_err!("batch index {n} out of range for {:?}", self.shape));
        }
        let sz = c * h * w;
        Self::new([1, c, h, w], self.data[n * sz..(n + 1) * sz].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    PerChannel,
    PerPixel,
}

fn broadcast_kind<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Broadcast> {
    let [_, c, h, w] = a.shape;
    if a.shape == b.shape {
        Ok(Broadcast::None)
    } else if b.shape == [1, c, 1, 1] {
        Ok(Broadcast::PerChannel)
    } else if b.shape == [1, 1, h, w] {
        Ok(Broadcast::PerPixel)
    } else {
        Err(shape_err!("cannot broadcast {:?} against {:?}", b.shape, a.shape))
    }
}

#[inline]
fn b_index(kind: Broadcast, shape: [usize; 4], i: usize) -> usize {
    let [_, c, h, w] = shape;
    match kind {
        Broadcast::None => i,
        Broadcast::PerChannel => (i / (h * w)) % c,
        Broadcast::PerPixel => i % (h * w),
    }
}

/// Elementwise `a op b`; `b` may be `(1,C,1,1)` or `(1,1,H,W)`.
pub fn ew_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let kind = broadcast_kind(a, b)?;
    let data = a
        .data
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = b.data[b_index(kind, a.shape, i)];
            match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            }
        })
        .collect();
    Tensor::new(a.shape, data)
}

pub fn ew_binary_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: BinaryOp,
) -> Result<(Tensor<T>, VjpFn<'static, T, (Tensor<T>, Tensor<T>)>)> {
    let out = ew_binary(a, b, op)?;
    let kind = broadcast_kind(a, b)?;
    let (a, b) = (a.clone(), b.clone());
    let vjp = Box::new(move |g: &Tensor<T>| {
        g.expect_same_shape(&a, "ew_binary cotangent")?;
        let mut da = Vec::with_capacity(a.len());
        let mut db = vec![T::zero(); b.len()];
        for (i, &gi) in g.data.iter().enumerate() {
            let bi = b_index(kind, a.shape, i);
            let (ga, gb) = match op {
                BinaryOp::Add => (gi, gi),
                BinaryOp::Sub => (gi, -gi),
                BinaryOp::Mul => (gi * b.data[bi], gi * a.data[i]),
            };
            da.push(ga);
            db[bi] = db[bi] + gb;
        }
        Ok((Tensor::new(a.shape, da)?, Tensor::new(b.shape, db)?))
    });
    Ok((out, vjp))
}

/// Per-sample, per-channel spatial mean, shape `(N, C, 1, 1)`.
pub fn channel_mean<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = a.shape;
    if h * w == 0 {
        return Err(shape_err!("channel_mean of empty spatial extent {:?}", a.shape));
    }
    let plane = h * w;
    let denom = T::from_usize(plane).unwrap();
    let data = a
        .data
        .chunks_exact(plane)
        .map(|ch| {
            // accumulate around the first value so constant planes are exact
            let p0 = ch[0];
            p0 + ch.iter().map(|&v| v - p0).sum::<T>() / denom
        })
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn channel_mean_vjp<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, VjpFn<'static, T, Tensor<T>>)> {
    let out = channel_mean(a)?;
    let shape = a.shape;
    let vjp = Box::new(move |g: &Tensor<T>| {
        let [n, c, h, w] = shape;
        if g.shape != [n, c, 1, 1] {
            return Err(shape_err!("channel_mean cotangent {:?}", g.shape));
        }
        let inv = T::one() / T::from_usize(h * w).unwrap();
        Ok(Tensor::from_fn(shape, |ni, ci, _, _| g.data[ni * c + ci] * inv))
    });
    Ok((out, vjp))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(a: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => a.map(|v| v.max(T::zero())),
        Activation::Sigmoid => a.map(sigmoid),
    }
}

pub fn activation_vjp<T: Scalar>(a: &Tensor<T>, kind: Activation) -> (Tensor<T>, VjpFn<'static, T, Tensor<T>>) {
    let out = activation(a, kind);
    let saved = match kind {
        Activation::Relu => a.clone(),
        Activation::Sigmoid => out.clone(),
    };
    let vjp = Box::new(move |g: &Tensor<T>| match kind {
        Activation::Relu => g.zip_map(&saved, |g, x| if x > T::zero() { g } else { T::zero() }),
        Activation::Sigmoid => g.zip_map(&saved, |g, s| g * s * (T::one() - s)),
    });
    (out, vjp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_fill_and_contents() {
        let z = Tensor::<f64>::zeros([1, 1, 2, 2]);
        assert_eq!(z.len(), 4);
        assert!(z.data().iter().all(|&v| v == 0.0));

        let t = Tensor::<f64>::new([1, 2, 1, 1], vec![3.0, 5.0]).unwrap();
        assert_eq!(t.data(), &[3.0, 5.0]);

        let err = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0]);
        assert!(matches!(err, Err(crate::Error::Shape(_))));
    }

    #[test]
    fn binary_ops_and_shape_errors() {
        let a = Tensor::<f64>::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new([1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(ew_binary(&a, &b, BinaryOp::Add).unwrap().data(), &[4.0, 6.0]);

        let x = Tensor::<f64>::from_fn([1, 2, 2, 2], |_, c, y, x| (c + y * 2 + x) as f64);
        let (out, vjp) = ew_binary_vjp(&x, &x.zeros_like(), BinaryOp::Mul).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let (dx, _) = vjp(&Tensor::full(x.shape(), 1.0)).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));

        let bad = Tensor::<f64>::zeros([1, 2, 3, 3]);
        assert!(matches!(
            ew_binary(&x, &bad, BinaryOp::Add),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn broadcast_add_reduces_cotangent() {
        let a = Tensor::<f64>::from_fn([2, 3, 2, 2], |n, c, y, x| (n + c + y + x) as f64);
        let b = Tensor::<f64>::new([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let (out, vjp) = ew_binary_vjp(&a, &b, BinaryOp::Add).unwrap();
        // sum of a broadcast sum is the sum of the parts
        let expected = a.sum() + b.sum() * 8.0;
        assert!((out.sum() - expected).abs() < 1e-12);
        let (_, db) = vjp(&Tensor::full(a.shape(), 1.0)).unwrap();
        assert_eq!(db.data(), &[8.0, 8.0, 8.0]);

        let p = Tensor::<f64>::full([1, 1, 2, 2], 0.5);
        let (_, vjp) = ew_binary_vjp(&a, &p, BinaryOp::Sub).unwrap();
        let (_, dp) = vjp(&Tensor::full(a.shape(), 1.0)).unwrap();
        assert_eq!(dp.data(), &[-6.0; 4]);
    }

    #[test]
    fn channel_mean_examples() {
        let t = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(channel_mean(&t).unwrap().data(), &[2.5]);

        let c = Tensor::<f64>::full([1, 3, 4, 5], 0.7);
        assert!(channel_mean(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&m| (m - 0.7).abs() < 1e-15));

        let two = Tensor::<f64>::new([1, 2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(channel_mean(&two).unwrap().data(), &[0.0, 4.0]);

        let empty = Tensor::<f64>::zeros([1, 1, 0, 3]);
        assert!(channel_mean(&empty).is_err());
    }

    #[test]
    fn activations() {
        let z = Tensor::<f64>::zeros([1, 1, 1, 1]);
        assert_eq!(activation(&z, Activation::Sigmoid).data(), &[0.5]);
        let (_, vjp) = activation_vjp(&z, Activation::Sigmoid);
        assert_eq!(vjp(&Tensor::full([1, 1, 1, 1], 1.0)).unwrap().data(), &[0.25]);

        let r = Tensor::<f64>::new([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(activation(&r, Activation::Relu).data(), &[0.0, 2.0]);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f32>::from_fn([2, 2, 3, 3], |n, c, y, x| (n * 100 + c * 10 + y * 3 + x) as f32);
        let b = Tensor::<f32>::from_fn([2, 1, 3, 3], |n, _, y, x| -((n * 9 + y * 3 + x) as f32));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 3, 3, 3]);
        assert_eq!(cat.at(1, 2, 2, 1), b.at(1, 0, 2, 1));
        let parts = cat.split_channels(&[2, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn ops_are_deterministic() {
        let a = Tensor::<f32>::from_fn([1, 3, 4, 4], |_, c, y, x| ((c * 7 + y * 5 + x) as f32).sin());
        let b = a.map(|v| v * 1.5 + 0.25);
        let r1 = ew_binary(&a, &b, BinaryOp::Mul).unwrap();
        let r2 = ew_binary(&a, &b, BinaryOp::Mul).unwrap();
        assert_eq!(r1.data(), r2.data());
    }
}

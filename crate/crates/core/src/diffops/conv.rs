use crate::error::{param_err, shape_err, Result};
use crate::tensor::{activation_vjp, Activation, Scalar, Tensor, VjpFn};

/// Weights of one 2-D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    /// `(C_out, C_in, K, K)`
    pub weight: Tensor<T>,
    /// `(1, C_out, 1, 1)`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2dParams<T> {
    /// "Same"-size stride-1 layer.
    pub fn same(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let k = weight.shape()[2];
        let p = Self {
            weight,
            bias,
            stride: 1,
            padding: k.saturating_sub(1) / 2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros([c_out, c_in, k, k]),
            bias: Tensor::zeros([1, c_out, 1, 1]),
            stride: 1,
            padding: k.saturating_sub(1) / 2,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [co, _, kh, kw] = self.weight.shape();
        if kh != kw || kh % 2 == 0 {
            return Err(param_err!("kernel must be square and odd, got {kh}x{kw}"));
        }
        if self.bias.shape() != [1, co, 1, 1] {
            return Err(shape_err!(
                "bias shape {:?} does not match {co} output channels",
                self.bias.shape()
            ));
        }
        if self.stride == 0 {
            return Err(param_err!("stride must be positive"));
        }
        Ok(())
    }

    pub(crate) fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(shape_err!("input {h}x{w} smaller than kernel {k}"));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

/// Dense matrix of sampled input patches, `(C_in*K*K) x (Ho*Wo)`.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw_out = ho * wo;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of [`im2col`].
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw_out = ho * wo;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            let di = iy as usize * w + ix as usize;
                            plane[di] = plane[di] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = W · cols + b` for one sample; `out` is `C_out x HWo`.
pub(crate) fn gemm_forward<T: Scalar>(p: &Conv2dParams<T>, cols: &[T], hw_out: usize, out: &mut [T]) {
    let co = p.c_out();
    let ckk = p.weight.len() / co;
    for (o, chunk) in out.chunks_exact_mut(hw_out).enumerate() {
        chunk.fill(p.bias.data()[o]);
    }
    T::gemm(
        co,
        ckk,
        hw_out,
        p.weight.data(),
        (ckk as isize, 1),
        cols,
        (hw_out as isize, 1),
        T::one(),
        out,
        (hw_out as isize, 1),
    );
}

/// Weight/bias/column cotangents for one sample.
pub(crate) fn gemm_backward<T: Scalar>(
    p: &Conv2dParams<T>,
    cols: &[T],
    g: &[T],
    hw_out: usize,
    dw: &mut [T],
    db: &mut [T],
    dcols: &mut [T],
) {
    let co = p.c_out();
    let ckk = p.weight.len() / co;
    for (o, chunk) in g.chunks_exact(hw_out).enumerate() {
        db[o] = db[o] + chunk.iter().copied().sum::<T>();
    }
    // dW += g · colsᵀ
    T::gemm(
        co,
        hw_out,
        ckk,
        g,
        (hw_out as isize, 1),
        cols,
        (1, hw_out as isize),
        T::one(),
        dw,
        (ckk as isize, 1),
    );
    // dcols = Wᵀ · g
    T::gemm(
        ckk,
        co,
        hw_out,
        p.weight.data(),
        (1, ckk as isize),
        g,
        (hw_out as isize, 1),
        T::zero(),
        dcols,
        (hw_out as isize, 1),
    );
}

fn check_input<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<()> {
    p.validate()?;
    if x.shape()[1] != p.c_in() {
        return Err(shape_err!(
            "conv2d: input has {} channels, weight expects {}",
            x.shape()[1],
            p.c_in()
        ));
    }
    Ok(())
}

struct ConvForward<T> {
    out: Tensor<T>,
    cols: Vec<Vec<T>>,
    ho: usize,
    wo: usize,
}

fn conv_forward<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>, keep: bool) -> Result<ConvForward<T>> {
    check_input(x, p)?;
    let [n, c, h, w] = x.shape();
    let (ho, wo) = p.out_size(h, w)?;
    let k = p.kernel();
    let co = p.c_out();
    let hw_out = ho * wo;
    let mut out = vec![T::zero(); n * co * hw_out];
    let mut kept = Vec::new();
    let mut cols = vec![T::zero(); c * k * k * hw_out];
    for ni in 0..n {
        let xs = &x.data()[ni * c * h * w..(ni + 1) * c * h * w];
        im2col(xs, c, h, w, k, p.stride, p.padding, ho, wo, &mut cols);
        gemm_forward(p, &cols, hw_out, &mut out[ni * co * hw_out..(ni + 1) * co * hw_out]);
        if keep {
            kept.push(cols.clone());
        }
    }
    Ok(ConvForward {
        out: Tensor::new([n, co, ho, wo], out)?,
        cols: kept,
        ho,
        wo,
    })
}

/// Zero-padded cross-correlation.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>) -> Result<Tensor<T>> {
    Ok(conv_forward(x, p, false)?.out)
}

pub fn conv2d_vjp<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
) -> Result<(Tensor<T>, VjpFn<'static, T, Conv2dGrads<T>>)> {
    let fwd = conv_forward(x, p, true)?;
    let (cols, ho, wo) = (fwd.cols, fwd.ho, fwd.wo);
    let p = p.clone();
    let x_shape = x.shape();
    let out_shape = fwd.out.shape();
    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != out_shape {
            return Err(shape_err!("conv2d cotangent {:?} != {:?}", g.shape(), out_shape));
        }
        let [n, c, h, w] = x_shape;
        let k = p.kernel();
        let co = p.c_out();
        let hw_out = ho * wo;
        let mut dx = vec![T::zero(); x_shape.iter().product()];
        let mut dw = vec![T::zero(); p.weight.len()];
        let mut db = vec![T::zero(); co];
        let mut dcols = vec![T::zero(); c * k * k * hw_out];
        for ni in 0..n {
            let gs = &g.data()[ni * co * hw_out..(ni + 1) * co * hw_out];
            gemm_backward(&p, &cols[ni], gs, hw_out, &mut dw, &mut db, &mut dcols);
            col2im(
                &dcols,
                c,
                h,
                w,
                k,
                p.stride,
                p.padding,
                ho,
                wo,
                &mut dx[ni * c * h * w..(ni + 1) * c * h * w],
            );
        }
        Ok(Conv2dGrads {
            x: Tensor::new(x_shape, dx)?,
            weight: Tensor::new(p.weight.shape(), dw)?,
            bias: Tensor::new([1, co, 1, 1], db)?,
        })
    });
    Ok((fwd.out, vjp))
}

#[derive(Clone, Debug)]
pub struct ResidualGrads<T> {
    pub x: Tensor<T>,
    pub conv1: Conv2dGrads<T>,
    pub conv2: Conv2dGrads<T>,
}

fn check_residual<T: Scalar>(x: &Tensor<T>, p1: &Conv2dParams<T>, p2: &Conv2dParams<T>) -> Result<()> {
    let c = x.shape()[1];
    for p in [p1, p2] {
        if p.kernel() != 3 || p.padding != 1 || p.stride != 1 {
            return Err(param_err!("residual block convs must be 3x3, stride 1, pad 1"));
        }
        if p.c_in() != c || p.c_out() != c {
            return Err(shape_err!(
                "residual branch {}->{} does not preserve {c} channels",
                p.c_in(),
                p.c_out()
            ));
        }
    }
    Ok(())
}

/// `x + conv2(relu(conv1(x)))`.
pub fn residual_block<T: Scalar>(x: &Tensor<T>, p1: &Conv2dParams<T>, p2: &Conv2dParams<T>) -> Result<Tensor<T>> {
    check_residual(x, p1, p2)?;
    let h = conv2d(x, p1)?.map(|v| v.max(T::zero()));
    let branch = conv2d(&h, p2)?;
    x.zip_map(&branch, |a, b| a + b)
}

pub fn residual_block_vjp<T: Scalar>(
    x: &Tensor<T>,
    p1: &Conv2dParams<T>,
    p2: &Conv2dParams<T>,
) -> Result<(Tensor<T>, VjpFn<'static, T, ResidualGrads<T>>)> {
    check_residual(x, p1, p2)?;
    let (h1, back1) = conv2d_vjp(x, p1)?;
    let (a1, back_relu) = activation_vjp(&h1, Activation::Relu);
    let (branch, back2) = conv2d_vjp(&a1, p2)?;
    let out = x.zip_map(&branch, |a, b| a + b)?;
    let vjp = Box::new(move |g: &Tensor<T>| {
        let conv2 = back2(g)?;
        let da1 = back_relu(&conv2.x)?;
        let conv1 = back1(&da1)?;
        let dx = g.zip_map(&conv1.x, |a, b| a + b)?;
        Ok(ResidualGrads { x: dx, conv1, conv2 })
    });
    Ok((out, vjp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_identity() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 4], |n, _, y, x| (n * 12 + y * 4 + x) as f64);
        let p = Conv2dParams::same(Tensor::full([1, 1, 1, 1], 1.0), Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn box_sum_with_zero_padding() {
        let x = Tensor::<f64>::full([1, 1, 3, 3], 1.0);
        let p = Conv2dParams::same(Tensor::full([1, 1, 3, 3], 1.0), Tensor::zeros([1, 1, 1, 1])).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, r, c), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn strided_output_size_and_values() {
        let x = Tensor::<f64>::from_fn([1, 1, 5, 5], |_, _, y, x| (y * 5 + x) as f64);
        let mut p = Conv2dParams::zeros(1, 1, 3);
        p.weight = Tensor::from_fn([1, 1, 3, 3], |_, _, i, j| if i == 1 && j == 1 { 1.0 } else { 0.0 });
        p.stride = 2;
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert_eq!(y.at(0, 0, 1, 2), x.at(0, 0, 2, 4));
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let p = Conv2dParams::<f32>::zeros(3, 4, 3);
        assert!(matches!(conv2d(&x, &p), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn residual_identity_cases() {
        let x = Tensor::<f64>::from_fn([1, 4, 5, 5], |_, c, y, x| ((c + 3 * y + x) as f64).cos());
        let z = Conv2dParams::zeros(4, 4, 3);
        assert_eq!(residual_block(&x, &z, &z).unwrap(), x);

        let mut p1 = Conv2dParams::zeros(4, 4, 3);
        p1.weight = Tensor::full([4, 4, 3, 3], 0.3);
        let mut p2 = p1.clone();
        p2.weight = Tensor::full([4, 4, 3, 3], -0.2);
        let zero = Tensor::<f64>::zeros([1, 4, 5, 5]);
        assert!(residual_block(&zero, &p1, &p2)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));

        let wide = Conv2dParams::<f64>::zeros(5, 4, 3);
        assert!(residual_block(&x, &wide, &z).is_err());
    }
}

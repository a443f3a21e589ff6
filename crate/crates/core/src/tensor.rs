//! Dense row-major tensors and the forward/backward kernels behind the tape.
//!
//! Activations use `N, C, H, W` order. Every kernel here is a plain function
//! over borrowed buffers with a fixed accumulation order, so repeated calls on
//! identical inputs are bit-identical.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, rejecting a length/shape disagreement or non-finite data.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        check_finite("tensor construction", &data)?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Unchecked constructor for kernels that validate finiteness themselves.
    pub(crate) fn raw(shape: &[usize], data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    /// Marks the tensor as a gradient target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[T]) {
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, &d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    /// Scalar value of a zero-dimensional (or single element) tensor.
    pub fn item(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Shape as `(N, C, H, W)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a 4-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + y) * ws + x]
    }
}

pub(crate) fn check_finite<T: Real>(what: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `dst[x] += w0*src[x-1] + w1*src[x] + w2*src[x+1]` with zero padding.
#[inline]
fn row_corr3<T: Real>(dst: &mut [T], src: &[T], w: [T; 3]) {
    let n = dst.len();
    if n == 1 {
        dst[0] += w[1] * src[0];
        return;
    }
    dst[0] += w[1] * src[0] + w[2] * src[1];
    for (((d, &a), &b), &c) in dst[1..n - 1]
        .iter_mut()
        .zip(&src[..n - 2])
        .zip(&src[1..n - 1])
        .zip(&src[2..])
    {
        *d += w[0] * a + w[1] * b + w[2] * c;
    }
    dst[n - 1] += w[0] * src[n - 2] + w[1] * src[n - 1];
}

/// Dot products of `g` against `s` shifted by -1, 0, +1 with zero padding.
#[inline]
fn row_dots3<T: Real>(g: &[T], s: &[T]) -> [T; 3] {
    let n = g.len();
    let mut left = T::zero();
    let mut mid = T::zero();
    let mut right = T::zero();
    for (&a, &b) in g.iter().zip(s) {
        mid += a * b;
    }
    if n > 1 {
        for (&a, &b) in g[1..].iter().zip(&s[..n - 1]) {
            left += a * b;
        }
        for (&a, &b) in g[..n - 1].iter().zip(&s[1..]) {
            right += a * b;
        }
    }
    [left, mid, right]
}

fn conv_shapes<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, cin, h, w) = input.dims4()?;
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: input.shape().to_vec(),
        rhs: kernel.shape().to_vec(),
    };
    let (cout, kcin, kh, kw) = kernel.dims4().map_err(|_| mismatch())?;
    if kh != 3 || kw != 3 || kcin != cin || h == 0 || w == 0 {
        return Err(mismatch());
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: kernel.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    Ok((n, cin, cout, h, w))
}

/// Stride-1, zero-padded 3x3 cross-correlation plus per-channel bias.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cin, cout, h, w) = conv_shapes(input, kernel, bias)?;
    let plane = h * w;
    let mut out = vec![T::zero(); n * cout * plane];
    let (x, k, b) = (input.data(), kernel.data(), bias.data());
    for ni in 0..n {
        for co in 0..cout {
            let dst = &mut out[(ni * cout + co) * plane..][..plane];
            dst.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..cin {
                let src = &x[(ni * cin + ci) * plane..][..plane];
                let kk = &k[(co * cin + ci) * 9..][..9];
                for y in 0..h {
                    let drow = &mut dst[y * w..][..w];
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let srow = &src[(iy - 1) * w..][..w];
                        row_corr3(drow, srow, [kk[ky * 3], kk[ky * 3 + 1], kk[ky * 3 + 2]]);
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, cout, h, w],
        data: out,
        requires_grad: false,
        grad: None,
    })
}

/// Gradient of [`conv2d`] with respect to its input.
pub(crate) fn conv2d_grad_input<T: Real>(
    grad_out: &[T],
    kernel: &Tensor<T>,
    (n, cin, cout, h, w): (usize, usize, usize, usize, usize),
) -> Vec<T> {
    let plane = h * w;
    let k = kernel.data();
    let mut gin = vec![T::zero(); n * cin * plane];
    for ni in 0..n {
        for ci in 0..cin {
            let dst = &mut gin[(ni * cin + ci) * plane..][..plane];
            for co in 0..cout {
                let g = &grad_out[(ni * cout + co) * plane..][..plane];
                let kk = &k[(co * cin + ci) * 9..][..9];
                for iy in 0..h {
                    let drow = &mut dst[iy * w..][..w];
                    for ky in 0..3 {
                        // output row y reads input row y + ky - 1
                        let y = iy + 1;
                        if y < ky || y - ky >= h {
                            continue;
                        }
                        let grow = &g[(y - ky) * w..][..w];
                        row_corr3(drow, grow, [kk[ky * 3 + 2], kk[ky * 3 + 1], kk[ky * 3]]);
                    }
                }
            }
        }
    }
    gin
}

/// Gradients of [`conv2d`] with respect to kernel and bias.
pub(crate) fn conv2d_grad_params<T: Real>(
    grad_out: &[T],
    input: &Tensor<T>,
    (n, cin, cout, h, w): (usize, usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let plane = h * w;
    let x = input.data();
    let mut gk = vec![T::zero(); cout * cin * 9];
    let mut gb = vec![T::zero(); cout];
    for ni in 0..n {
        for co in 0..cout {
            let g = &grad_out[(ni * cout + co) * plane..][..plane];
            gb[co] += g.iter().copied().sum::<T>();
            for ci in 0..cin {
                let src = &x[(ni * cin + ci) * plane..][..plane];
                let kk = &mut gk[(co * cin + ci) * 9..][..9];
                for y in 0..h {
                    let grow = &g[y * w..][..w];
                    for ky in 0..3 {
                        let iy = y + ky;
                        if iy < 1 || iy > h {
                            continue;
                        }
                        let d = row_dots3(grow, &src[(iy - 1) * w..][..w]);
                        kk[ky * 3] += d[0];
                        kk[ky * 3 + 1] += d[1];
                        kk[ky * 3 + 2] += d[2];
                    }
                }
            }
        }
    }
    (gk, gb)
}

pub(crate) fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    conv_shapes(input, kernel, bias)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
        requires_grad: false,
        grad: None,
    }
}

/// Per-pixel softmax over the channel axis of an `N, C, H, W` tensor.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dims4()?;
    if c < 2 {
        return Err(Error::invalid(format!("softmax needs at least 2 channels, got {c}")));
    }
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for ci in 0..c {
                max = max.max(src[base + ci * plane + p]);
            }
            let mut total = T::zero();
            for ci in 0..c {
                let e = (src[base + ci * plane + p] - max).exp();
                out[base + ci * plane + p] = e;
                total += e;
            }
            for ci in 0..c {
                out[base + ci * plane + p] /= total;
            }
        }
    }
    Ok(Tensor {
        shape: logits.shape.clone(),
        data: out,
        requires_grad: false,
        grad: None,
    })
}

/// Backward of [`softmax_channels`]: `dx_c = y_c (g_c - sum_k g_k y_k)`.
pub(crate) fn softmax_channels_grad<T: Real>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (n, c, h, w) = (y.shape[0], y.shape[1], y.shape[2], y.shape[3]);
    let plane = h * w;
    let yd = y.data();
    let mut out = vec![T::zero(); yd.len()];
    for ni in 0..n {
        let base = ni * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ci in 0..c {
                let i = base + ci * plane + p;
                dot += g[i] * yd[i];
            }
            for ci in 0..c {
                let i = base + ci * plane + p;
                out[i] = yd[i] * (g[i] - dot);
            }
        }
    }
    out
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
pub fn argmax_channels<T: Real>(t: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * plane);
    for ni in 0..n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = d[ni * c * plane + p];
            for ci in 1..c {
                let v = d[(ni * c + ci) * plane + p];
                if v > best_v {
                    best = ci;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch_and_nan() {
        assert!(Tensor::<f64>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(matches!(
            Tensor::<f64>::new(&[1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn zero_kernel_passes_only_bias() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::new(&[1], vec![2.0]).unwrap();
        assert_eq!(conv2d(&x, &k, &b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.37 - 2.0).collect();
        let x = Tensor::new(&[1, 1, 4, 5], data.clone()).unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = Tensor::new(&[1, 1, 3, 3], kd).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b).unwrap().data(), &data[..]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::zeros(&[3, 1, 3, 3]);
        let b = Tensor::zeros(&[3]);
        let err = conv2d(&x, &k, &b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[3, 1, 3, 3]"), "{err}");
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_analytic_cases() {
        let x = Tensor::<f64>::new(&[1, 4, 1, 2], vec![0.3; 8]).unwrap();
        for &p in softmax_channels(&x).unwrap().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let x = Tensor::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15);
        assert!((y.data()[1] - 0.75).abs() < 1e-15);
        assert!(softmax_channels(&Tensor::<f64>::zeros(&[1, 1, 2, 2])).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let x = Tensor::<f64>::new(&[1, 2, 1, 1], vec![1000.0, 0.0]).unwrap();
        let y = softmax_channels(&x).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_width_rows_are_supported() {
        let x = Tensor::new(&[1, 1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]);
        assert_eq!(conv2d(&x, &k, &b).unwrap().data(), &[3.0, 6.0, 5.0]);
    }
}

//! Layer kernels with forward and backward passes.
//!
//! All kernels are pure functions over [`Tensor`]s. Convolution is
//! cross-correlation with zero padding; max-pool ties resolve to the first
//! maximal element in row-major window order; the ReLU derivative at exactly
//! zero is zero.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, LONG_SUM};

/// Running sum that widens to `f64` when the number of terms is large.
struct Acc<E> {
    wide: bool,
    narrow: E,
    wide_sum: f64,
}

impl<E: Element> Acc<E> {
    #[inline]
    fn new(terms: usize, init: E) -> Self {
        Self {
            wide: terms > LONG_SUM,
            narrow: init,
            wide_sum: init.as_f64(),
        }
    }

    #[inline]
    fn add(&mut self, x: E) {
        if self.wide {
            self.wide_sum += x.as_f64();
        } else {
            self.narrow = self.narrow + x;
        }
    }

    #[inline]
    fn get(&self) -> E {
        if self.wide {
            E::from_f64(self.wide_sum)
        } else {
            self.narrow
        }
    }
}

/// Geometry of a 2D convolution, resolved against a concrete input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input_shape: (usize, usize, usize),
        kernel_shape: (usize, usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (c, h, w) = input_shape;
        let (k, kc, kh, kw) = kernel_shape;
        if stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be positive".into()));
        }
        if kc != c {
            return Err(Error::dim(format!(
                "input has {c} channels but kernels expect {kc}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            in_channels: c,
            in_h: h,
            in_w: w,
            kernels: k,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn of(input: &Tensor<impl Element>, kernels: &Tensor<impl Element>, stride: usize, pad: usize) -> Result<Self> {
        let input_shape = input.dims3()?;
        let kernel_shape = match *kernels.shape() {
            [k, c, kh, kw] => (k, c, kh, kw),
            ref s => return Err(Error::dim(format!("expected kernels [K,C,kh,kw], got {s:?}"))),
        };
        Self::resolve(input_shape, kernel_shape, stride, pad)
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.kernels, self.out_h, self.out_w]
    }

    /// Input coordinate hit by output row/col `o` and kernel tap `t`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

pub fn conv2d_forward<E: Element>(
    input: &Tensor<E>,
    kernels: &Tensor<E>,
    bias: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let g = ConvGeometry::of(input, kernels, stride, pad)?;
    bias.expect_shape(&[g.kernels])?;
    let x = input.data();
    let w = kernels.data();
    let terms = g.in_channels * g.kh * g.kw;
    let mut out = Vec::with_capacity(g.kernels * g.out_h * g.out_w);
    for k in 0..g.kernels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = Acc::new(terms, E::zero());
                for c in 0..g.in_channels {
                    for i in 0..g.kh {
                        let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                        for j in 0..g.kw {
                            let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                            let xv = x[(c * g.in_h + iy) * g.in_w + ix];
                            let wv = w[((k * g.in_channels + c) * g.kh + i) * g.kw + j];
                            acc.add(xv * wv);
                        }
                    }
                }
                out.push(acc.get() + bias.data()[k]);
            }
        }
    }
    Tensor::new(g.output_shape(), out)
}

/// Gradients of a convolution with respect to its input and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<E = f32> {
    pub input: Tensor<E>,
    pub kernels: Tensor<E>,
    pub bias: Tensor<E>,
}

/// Gradient of a convolution with respect to its input only.
pub fn conv2d_backward_input<E: Element>(
    input: &Tensor<E>,
    kernels: &Tensor<E>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<E>,
) -> Result<Tensor<E>> {
    let g = ConvGeometry::of(input, kernels, stride, pad)?;
    upstream.expect_shape(&g.output_shape())?;
    let w = kernels.data();
    let up = upstream.data();
    let mut grad = input.zeros_like();
    let gx = grad.data_mut();
    for k in 0..g.kernels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let u = up[(k * g.out_h + oy) * g.out_w + ox];
                if u == E::zero() {
                    continue;
                }
                for c in 0..g.in_channels {
                    for i in 0..g.kh {
                        let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                        for j in 0..g.kw {
                            let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                            let wv = w[((k * g.in_channels + c) * g.kh + i) * g.kw + j];
                            let slot = &mut gx[(c * g.in_h + iy) * g.in_w + ix];
                            *slot = *slot + u * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

pub fn conv2d_backward<E: Element>(
    input: &Tensor<E>,
    kernels: &Tensor<E>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<E>,
) -> Result<ConvGrads<E>> {
    let input_grad = conv2d_backward_input(input, kernels, stride, pad, upstream)?;
    let g = ConvGeometry::of(input, kernels, stride, pad)?;
    let x = input.data();
    let up = upstream.data();
    let positions = g.out_h * g.out_w;

    let mut kernel_grad = kernels.zeros_like();
    let gw = kernel_grad.data_mut();
    for k in 0..g.kernels {
        let up_k = &up[k * positions..(k + 1) * positions];
        for c in 0..g.in_channels {
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let mut acc = Acc::new(positions, E::zero());
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, i, g.in_h) else { continue };
                        for ox in 0..g.out_w {
                            let Some(ix) = g.source(ox, j, g.in_w) else { continue };
                            acc.add(up_k[oy * g.out_w + ox] * x[(c * g.in_h + iy) * g.in_w + ix]);
                        }
                    }
                    gw[((k * g.in_channels + c) * g.kh + i) * g.kw + j] = acc.get();
                }
            }
        }
    }

    let bias_grad = Tensor::from_fn([g.kernels], |k| {
        let mut acc = Acc::new(positions, E::zero());
        up[k * positions..(k + 1) * positions]
            .iter()
            .for_each(|&u| acc.add(u));
        acc.get()
    })?;

    Ok(ConvGrads {
        input: input_grad,
        kernels: kernel_grad,
        bias: bias_grad,
    })
}

#[inline]
fn relu_scalar<E: Element>(x: E) -> E {
    if x > E::zero() {
        x
    } else {
        E::zero()
    }
}

pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    input.map(relu_scalar)
}

/// Passes `upstream` where `input > 0`; zero elsewhere, including at exactly 0.
pub fn relu_backward<E: Element>(input: &Tensor<E>, upstream: &Tensor<E>) -> Result<Tensor<E>> {
    input.zip_map(upstream, |x, u| if x > E::zero() { u } else { E::zero() })
}

/// Output of a max-pool forward pass: pooled values plus, for each output
/// element, the flat index of the input element it was taken from.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<E = f32> {
    pub output: Tensor<E>,
    pub argmax: Vec<usize>,
}

pub fn maxpool_output_dims(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "max-pool window and stride must be positive".into(),
        ));
    }
    if window > h || window > w {
        return Err(Error::dim(format!(
            "max-pool window {window} exceeds input {h}x{w}"
        )));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

pub fn maxpool_forward<E: Element>(input: &Tensor<E>, window: usize, stride: usize) -> Result<Pooled<E>> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = maxpool_output_dims(h, w, window, stride)?;
    let x = input.data();
    let mut output = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + oy * stride) * w + ox * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = (ch * h + oy * stride + i) * w + ox * stride + j;
                        // Strict comparison keeps the first maximum.
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                output.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new([c, oh, ow], output)?,
        argmax,
    })
}

/// Routes each upstream value to the input position recorded in `argmax`.
pub fn maxpool_backward<E: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    upstream: &Tensor<E>,
) -> Result<Tensor<E>> {
    if argmax.len() != upstream.len() {
        return Err(Error::dim(format!(
            "upstream has {} elements but pool recorded {} positions",
            upstream.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape.to_vec())?;
    let gx = grad.data_mut();
    for (&idx, &u) in argmax.iter().zip(upstream.data()) {
        let slot = gx
            .get_mut(idx)
            .ok_or_else(|| Error::dim(format!("pool index {idx} outside input")))?;
        *slot = *slot + u;
    }
    Ok(grad)
}

fn dense_dims<E: Element>(weights: &Tensor<E>) -> Result<(usize, usize)> {
    weights.dims2().map_err(|_| {
        Error::dim(format!("expected dense weights [U,D], got {:?}", weights.shape()))
    })
}

pub fn dense_forward<E: Element>(input: &Tensor<E>, weights: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (units, d) = dense_dims(weights)?;
    if input.len() != d {
        return Err(Error::dim(format!(
            "dense layer expects {d} inputs, got {}",
            input.len()
        )));
    }
    bias.expect_shape(&[units])?;
    let x = input.data();
    let w = weights.data();
    Tensor::from_fn([units], |u| {
        let mut acc = Acc::new(d, E::zero());
        w[u * d..(u + 1) * d]
            .iter()
            .zip(x)
            .for_each(|(&wv, &xv)| acc.add(wv * xv));
        acc.get() + bias.data()[u]
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<E = f32> {
    pub input: Tensor<E>,
    pub weights: Tensor<E>,
    pub bias: Tensor<E>,
}

/// `Wᵀ·upstream`, reshaped to the input's shape.
pub fn dense_backward_input<E: Element>(
    input_shape: &[usize],
    weights: &Tensor<E>,
    upstream: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (units, d) = dense_dims(weights)?;
    upstream.expect_shape(&[units])?;
    let w = weights.data();
    let up = upstream.data();
    let grad = Tensor::from_fn([d], |j| {
        let mut acc = Acc::new(units, E::zero());
        (0..units).for_each(|u| acc.add(w[u * d + j] * up[u]));
        acc.get()
    })?;
    grad.reshape(input_shape.to_vec())
}

pub fn dense_backward<E: Element>(
    input: &Tensor<E>,
    weights: &Tensor<E>,
    upstream: &Tensor<E>,
) -> Result<DenseGrads<E>> {
    let input_grad = dense_backward_input(input.shape(), weights, upstream)?;
    let (units, d) = dense_dims(weights)?;
    let x = input.data();
    let up = upstream.data();
    let weight_grad = Tensor::from_fn([units, d], |i| up[i / d] * x[i % d])?;
    Ok(DenseGrads {
        input: input_grad,
        weights: weight_grad,
        bias: upstream.clone(),
    })
}

/// Max-shifted softmax over all elements.
pub fn softmax<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let max = logits.max_value();
    let exps = logits.map(|z| (z - max).exp());
    let total = exps.data().iter().fold(E::zero(), |acc, &e| acc + e);
    exps.map(|e| e / total)
}

/// Vector–Jacobian product of softmax: `p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward<E: Element>(probs: &Tensor<E>, upstream: &Tensor<E>) -> Result<Tensor<E>> {
    probs.expect_same_shape(upstream)?;
    let dot = probs
        .data()
        .iter()
        .zip(upstream.data())
        .fold(E::zero(), |acc, (&p, &g)| acc + p * g);
    probs.zip_map(upstream, |p, g| p * (g - dot))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Central-difference gradient of `f` at `x` along every coordinate.
    fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        const EPS: f64 = 1e-4;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += EPS;
                let mut minus = x.clone();
                minus.data_mut()[i] -= EPS;
                (f(&plus) - f(&minus)) / (2.0 * EPS)
            })
            .collect()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "coordinate {i}: analytic {a} vs numeric {n} (rel {rel})");
        }
    }

    #[test]
    fn conv_identity_case() {
        let x = t(&[1, 1, 1], &[1.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv2d_forward(&x, &k, &b, 1, 0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::zeros([2, 5, 5]).unwrap();
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = Tensor::zeros([3]).unwrap();
        let y = conv2d_forward(&x, &k, &b, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_diagonal_kernel_on_3x3() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let b = t(&[1], &[0.0]);
        let y = conv2d_forward(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[6., 8., 12., 14.]);
    }

    #[test]
    fn conv_output_size_with_stride_and_pad() {
        let x = Tensor::<f32>::zeros([1, 7, 6]).unwrap();
        let k = Tensor::zeros([2, 1, 3, 2]).unwrap();
        let b = Tensor::zeros([2]).unwrap();
        let y = conv2d_forward(&x, &k, &b, 2, 1).unwrap();
        // floor((7+2-3)/2)+1 = 4, floor((6+2-2)/2)+1 = 4
        assert_eq!(y.shape(), &[2, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros([2, 4, 4]).unwrap();
        let k = Tensor::zeros([1, 3, 2, 2]).unwrap();
        let b = Tensor::zeros([1]).unwrap();
        assert!(matches!(conv2d_forward(&x, &k, &b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_backward_identity_kernel() {
        let x = t(&[1, 3, 3], &[0.5; 9]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let up = Tensor::full([1, 3, 3], 1.0).unwrap();
        let g = conv2d_backward(&x, &k, 1, 0, &up).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 4, 4], &mut rng);
        let k = random(&[3, 2, 2, 2], &mut rng);
        let up = Tensor::zeros([3, 3, 3]).unwrap();
        let g = conv2d_backward(&x, &k, 1, 0, &up).unwrap();
        for grad in [&g.input, &g.kernels, &g.bias] {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn conv_backward_upstream_shape_checked() {
        let x = Tensor::<f64>::zeros([1, 3, 3]).unwrap();
        let k = Tensor::zeros([1, 1, 2, 2]).unwrap();
        let up = Tensor::zeros([1, 3, 3]).unwrap();
        assert!(matches!(
            conv2d_backward(&x, &k, 1, 0, &up),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_backward_matches_finite_differences_on_3x3() {
        let x = t(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let k = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let b = t(&[1], &[0.0]);
        let up = t(&[1, 2, 2], &[0.3, -1.2, 0.7, 2.0]);
        let g = conv2d_backward(&x, &k, 1, 0, &up).unwrap();
        let numeric = numeric_grad(&x, |x| dot(&conv2d_forward(x, &k, &b, 1, 0).unwrap(), &up));
        assert_close(g.input.data(), &numeric);
    }

    #[test]
    fn conv_backward_matches_finite_differences_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = random(&[2, 6, 5], &mut rng);
            let k = random(&[3, 2, 3, 2], &mut rng);
            let b = random(&[3], &mut rng);
            let out_shape = conv2d_forward(&x, &k, &b, stride, pad).unwrap().shape().to_vec();
            let up = random(&out_shape, &mut rng);
            let g = conv2d_backward(&x, &k, stride, pad, &up).unwrap();
            let f_x = numeric_grad(&x, |x| dot(&conv2d_forward(x, &k, &b, stride, pad).unwrap(), &up));
            let f_k = numeric_grad(&k, |k| dot(&conv2d_forward(&x, k, &b, stride, pad).unwrap(), &up));
            let f_b = numeric_grad(&b, |b| dot(&conv2d_forward(&x, &k, b, stride, pad).unwrap(), &up));
            assert_close(g.input.data(), &f_x);
            assert_close(g.kernels.data(), &f_k);
            assert_close(g.bias.data(), &f_b);
        }
    }

    #[test]
    fn conv_is_linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let b = Tensor::zeros([2]).unwrap();
        let x = random(&[1, 5, 5], &mut rng);
        let y = random(&[1, 5, 5], &mut rng);
        let (a, c) = (1.7, -0.4);
        let mix = x.scale(a).add(&y.scale(c)).unwrap();
        let lhs = conv2d_forward(&mix, &k, &b, 1, 1).unwrap();
        let rhs = conv2d_forward(&x, &k, &b, 1, 1)
            .unwrap()
            .scale(a)
            .add(&conv2d_forward(&y, &k, &b, 1, 1).unwrap().scale(c))
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_examples() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        let up = t(&[3], &[1., 1., 1.]);
        assert_eq!(relu_backward(&x, &up).unwrap().data(), &[0., 0., 1.]);
        let pos = t(&[3], &[0.1, 5., 3.]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[1, 2, 2], &[1., 2., 3., 4.]);
        let p = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        let g = maxpool_backward(x.shape(), &p.argmax, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[0., 0., 0., 1.]);

        let flat = t(&[1, 2, 2], &[5.; 4]);
        let p = maxpool_forward(&flat, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[5.0]);
        assert_eq!(p.argmax, vec![0]);
    }

    #[test]
    fn maxpool_overlapping_windows_accumulate() {
        let x = t(&[1, 3, 3], &[0., 0., 0., 0., 9., 0., 0., 0., 0.]);
        let p = maxpool_forward(&x, 2, 1).unwrap();
        assert_eq!(p.argmax, vec![4; 4]);
        let g = maxpool_backward(x.shape(), &p.argmax, &Tensor::full([1, 2, 2], 1.0).unwrap()).unwrap();
        assert_eq!(g.data()[4], 4.0);
        assert_eq!(g.sum_f64(), 4.0);
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = Tensor::<f32>::zeros([1, 2, 3]).unwrap();
        assert!(maxpool_forward(&x, 3, 1).is_err());
    }

    #[test]
    fn maxpool_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 6, 6], &mut rng);
        let p = maxpool_forward(&x, 2, 2).unwrap();
        let up = random(p.output.shape(), &mut rng);
        let g = maxpool_backward(x.shape(), &p.argmax, &up).unwrap();
        let numeric = numeric_grad(&x, |x| dot(&maxpool_forward(x, 2, 2).unwrap().output, &up));
        assert_close(g.data(), &numeric);
    }

    #[test]
    fn dense_examples() {
        let w = t(&[1, 2], &[1., 2.]);
        let b = t(&[1], &[3.]);
        let x = t(&[2], &[4., 5.]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[17.0]);

        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let zero = t(&[2], &[0., 0.]);
        assert_eq!(dense_forward(&x, &eye, &zero).unwrap(), x);

        let g = dense_backward(&x, &w, &t(&[1], &[0.0])).unwrap();
        for grad in [&g.input, &g.weights, &g.bias] {
            assert!(grad.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let w = Tensor::<f32>::zeros([2, 3]).unwrap();
        let b = Tensor::zeros([2]).unwrap();
        let x = Tensor::zeros([4]).unwrap();
        assert!(matches!(dense_forward(&x, &w, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[2, 2, 2], &mut rng);
        let w = random(&[3, 8], &mut rng);
        let b = random(&[3], &mut rng);
        let up = random(&[3], &mut rng);
        let g = dense_backward(&x, &w, &up).unwrap();
        assert_eq!(g.input.shape(), x.shape());
        assert_close(g.input.data(), &numeric_grad(&x, |x| dot(&dense_forward(x, &w, &b).unwrap(), &up)));
        assert_close(g.weights.data(), &numeric_grad(&w, |w| dot(&dense_forward(&x, w, &b).unwrap(), &up)));
        assert_close(g.bias.data(), &numeric_grad(&b, |b| dot(&dense_forward(&x, &w, b).unwrap(), &up)));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&t(&[2], &[0., 0.])).data(), &[0.5, 0.5]);
        let p = softmax(&t(&[2], &[2f64.ln(), 0.]));
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = softmax(&t(&[3], &[1000.5, 999., 1001.]));
        let base = softmax(&t(&[3], &[0.5, -1., 1.]));
        for (a, b) in shifted.data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(&[5], &mut rng);
        let up = random(&[5], &mut rng);
        let g = softmax_backward(&softmax(&z), &up).unwrap();
        assert_close(g.data(), &numeric_grad(&z, |z| dot(&softmax(z), &up)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_distribution(logits in prop::collection::vec(-15.0f64..15.0, 1..12)) {
                let n = logits.len();
                let p = softmax(&Tensor::new([n], logits).unwrap());
                prop_assert!((p.sum_f64() - 1.0).abs() < 1e-9);
                prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0 || n == 1));
            }

            #[test]
            fn softmax_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 1..8), c in -100.0f64..100.0) {
                let n = logits.len();
                let base = softmax(&Tensor::new([n], logits.clone()).unwrap());
                let moved = softmax(&Tensor::new([n], logits.iter().map(|z| z + c).collect()).unwrap());
                for (a, b) in base.data().iter().zip(moved.data()) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn maxpool_backward_conserves_mass(
                seed in any::<u64>(),
                c in 1usize..3, h in 2usize..7, w in 2usize..7,
                window in 1usize..3, stride in 1usize..3,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(&[c, h, w], &mut rng);
                let p = maxpool_forward(&x, window, stride).unwrap();
                let up = random(p.output.shape(), &mut rng);
                let g = maxpool_backward(x.shape(), &p.argmax, &up).unwrap();
                prop_assert!((g.sum_f64() - up.sum_f64()).abs() < 1e-12);
            }
        }
    }
}

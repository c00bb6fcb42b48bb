//! Dense tensors and the forward/backward layer kernels used by a branch.
//!
//! Every forward op returns its output together with a [`LayerCache`] that the
//! matching backward op consumes. Convolution is cross-correlation (kernels are
//! not flipped). Kernels are fixed at 3×3 and pooling at 2×2 with stride 2.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classes::ClassDistribution;
use crate::error::{Error, Result};

/// Floating-point sample type a tensor can hold. 64-bit for verification,
/// 32-bit for training throughput.
pub trait Scalar: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major N-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} samples but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    /// Panics if any dimension is zero.
    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Adds `other` elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!("{what} must be [C, H, W], got {:?}", self.shape))),
        }
    }
}

/// Saved forward state, consumed by the backward op of the forward op that made it.
///
/// Parameters are borrowed from the caller so a cache never copies weights.
#[derive(Debug, Clone)]
pub enum LayerCache<'w, T: Scalar> {
    Conv2d {
        input: Tensor<T>,
        kernels: &'w Tensor<T>,
        padding: usize,
        stride: usize,
    },
    MaxPool2 {
        input_shape: Vec<usize>,
        /// Flat input index of the winning element, one per output sample.
        argmax: Vec<usize>,
    },
    Relu {
        input: Tensor<T>,
    },
    FullyConnected {
        input: Tensor<T>,
        weights: &'w Tensor<T>,
    },
    Sigmoid {
        output: Tensor<T>,
    },
}

impl<T: Scalar> LayerCache<'_, T> {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerCache::Conv2d { .. } => "conv2d",
            LayerCache::MaxPool2 { .. } => "maxpool2",
            LayerCache::Relu { .. } => "relu",
            LayerCache::FullyConnected { .. } => "fully_connected",
            LayerCache::Sigmoid { .. } => "sigmoid",
        }
    }
}

fn mismatch<T: Scalar>(expected: &'static str, cache: &LayerCache<'_, T>) -> Error {
    Error::CacheMismatch {
        expected,
        found: cache.kind(),
    }
}

fn check_grad_shape<T: Scalar>(grad: &Tensor<T>, expected: &[usize]) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match forward output {:?}",
            grad.shape(),
            expected
        )));
    }
    Ok(())
}

pub const KERNEL_SIZE: usize = 3;

/// Output extent of a 3×3 convolution along one axis.
pub fn conv_output_size(size: usize, padding: usize, stride: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if padded < KERNEL_SIZE {
        return Err(Error::shape(format!(
            "extent {size} with padding {padding} is smaller than the 3x3 kernel"
        )));
    }
    if (padded - KERNEL_SIZE) % stride != 0 {
        return Err(Error::shape(format!(
            "extent {size} with padding {padding} and stride {stride} gives a non-integral output size"
        )));
    }
    Ok((padded - KERNEL_SIZE) / stride + 1)
}

/// `y += a·x`.
#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d = *d + a * v;
    }
}

const LANES: usize = 8;

/// Dot product with a fixed eight-lane summation order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    lanes.iter().fold(T::zero(), |s, &v| s + v) + tail
}

struct ConvGeometry {
    c_in: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    padding: usize,
    stride: usize,
}

impl ConvGeometry {
    /// Input index of tap (`ky`, `kx`) for output (`oy`, `ox`), if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the image, for stride 1.
    #[inline]
    fn valid_columns(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = (self.w + self.padding).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }
}

/// Unfolds the input into a `[C_in·9, H'·W']` matrix whose row
/// `(ci·3 + ky)·3 + kx` holds the samples tap (ky, kx) of channel ci sees.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let pix = g.ho * g.wo;
    let mut col = vec![T::zero(); g.c_in * KERNEL_SIZE * KERNEL_SIZE * pix];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let row = (ci * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let dst = &mut col[row * pix..(row + 1) * pix];
                if g.stride == 1 {
                    let (lo, hi) = g.valid_columns(kx);
                    for oy in 0..g.ho {
                        if let Some(iy) = (oy + ky).checked_sub(g.padding).filter(|&iy| iy < g.h) {
                            let src = iy * g.w + lo + kx - g.padding;
                            dst[oy * g.wo + lo..oy * g.wo + hi].copy_from_slice(&plane[src..src + hi - lo]);
                        }
                    }
                    continue;
                }
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            dst[oy * g.wo + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry) -> Vec<T> {
    let pix = g.ho * g.wo;
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..KERNEL_SIZE {
            for kx in 0..KERNEL_SIZE {
                let row = (ci * KERNEL_SIZE + ky) * KERNEL_SIZE + kx;
                let src = &col[row * pix..(row + 1) * pix];
                if g.stride == 1 {
                    let (lo, hi) = g.valid_columns(kx);
                    for oy in 0..g.ho {
                        if let Some(iy) = (oy + ky).checked_sub(g.padding).filter(|&iy| iy < g.h) {
                            let d = iy * g.w + lo + kx - g.padding;
                            for (a, &b) in plane[d..d + hi - lo]
                                .iter_mut()
                                .zip(&src[oy * g.wo + lo..oy * g.wo + hi])
                            {
                                *a = *a + b;
                            }
                        }
                    }
                    continue;
                }
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                            let d = &mut plane[iy * g.w + ix];
                            *d = *d + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 3×3 cross-correlation of `input [C_in, H, W]` with `kernels [C_out, C_in, 3, 3]`.
pub fn conv2d<'w, T: Scalar>(
    input: &Tensor<T>,
    kernels: &'w Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
    stride: usize,
) -> Result<(Tensor<T>, LayerCache<'w, T>)> {
    let (c_in, h, w) = input.dims3("conv2d input")?;
    let c_out = match kernels.shape()[..] {
        [co, ci, KERNEL_SIZE, KERNEL_SIZE] if ci == c_in => co,
        _ => {
            return Err(Error::shape(format!(
                "kernels {:?} incompatible with input channels {c_in} (expected [C_out, {c_in}, 3, 3])",
                kernels.shape()
            )))
        }
    };
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "bias {:?} does not match {c_out} output channels",
            bias.shape()
        )));
    }
    if padding > 1 {
        return Err(Error::invalid(format!("padding must be 0 or 1, got {padding}")));
    }
    let geom = ConvGeometry {
        c_in,
        h,
        w,
        ho: conv_output_size(h, padding, stride)?,
        wo: conv_output_size(w, padding, stride)?,
        padding,
        stride,
    };
    let pix = geom.ho * geom.wo;
    let taps = c_in * KERNEL_SIZE * KERNEL_SIZE;
    let col = im2col(input.data(), &geom);
    let mut out = vec![T::zero(); c_out * pix];
    for ((plane, weights), &b) in out
        .chunks_exact_mut(pix)
        .zip(kernels.data().chunks_exact(taps))
        .zip(bias.data())
    {
        plane.fill(b);
        for (&wt, src) in weights.iter().zip(col.chunks_exact(pix)) {
            axpy(wt, src, plane);
        }
    }
    let output = Tensor::new(vec![c_out, geom.ho, geom.wo], out)?;
    let cache = LayerCache::Conv2d {
        input: input.clone(),
        kernels,
        padding,
        stride,
    };
    Ok((output, cache))
}

/// Gradients of a [`conv2d`] call: `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &LayerCache<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let LayerCache::Conv2d {
        input,
        kernels,
        padding,
        stride,
    } = cache
    else {
        return Err(mismatch("conv2d", cache));
    };
    let (c_in, h, w) = input.dims3("cached conv2d input")?;
    let c_out = kernels.shape()[0];
    let geom = ConvGeometry {
        c_in,
        h,
        w,
        ho: conv_output_size(h, *padding, *stride)?,
        wo: conv_output_size(w, *padding, *stride)?,
        padding: *padding,
        stride: *stride,
    };
    check_grad_shape(grad_out, &[c_out, geom.ho, geom.wo])?;
    let pix = geom.ho * geom.wo;
    let taps = c_in * KERNEL_SIZE * KERNEL_SIZE;
    let col = im2col(input.data(), &geom);
    let g = grad_out.data();

    let mut gk = vec![T::zero(); c_out * taps];
    let mut gb = vec![T::zero(); c_out];
    let mut gcol = vec![T::zero(); taps * pix];
    let ones = vec![T::one(); pix];
    for (co, (gplane, weights)) in g.chunks_exact(pix).zip(kernels.data().chunks_exact(taps)).enumerate() {
        gb[co] = dot(gplane, &ones);
        for (t, src) in col.chunks_exact(pix).enumerate() {
            gk[co * taps + t] = dot(gplane, src);
        }
        for (&wt, dst) in weights.iter().zip(gcol.chunks_exact_mut(pix)) {
            axpy(wt, gplane, dst);
        }
    }
    let gx = col2im(&gcol, &geom);
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
        Tensor::new(vec![c_out], gb)?,
    ))
}

/// 2×2 max-pooling with stride 2. Ties go to the first element in row-major window order.
pub fn maxpool2<'w, T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, LayerCache<'w, T>)> {
    let (c, h, w) = input.dims3("maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 needs even height and width, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let top = base + 2 * oy * w + 2 * ox;
                let window = [top, top + 1, top + w, top + w + 1];
                let mut best = window[0];
                for &idx in &window[1..] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(vec![c, ho, wo], out)?,
        LayerCache::MaxPool2 {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, cache: &LayerCache<'_, T>) -> Result<Tensor<T>> {
    let LayerCache::MaxPool2 { input_shape, argmax } = cache else {
        return Err(mismatch("maxpool2", cache));
    };
    let expected = [input_shape[0], input_shape[1] / 2, input_shape[2] / 2];
    check_grad_shape(grad_out, &expected)?;
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        data[idx] = data[idx] + g;
    }
    Ok(gx)
}

pub fn relu<'w, T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, LayerCache<'w, T>) {
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    (out, LayerCache::Relu { input: input.clone() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, cache: &LayerCache<'_, T>) -> Result<Tensor<T>> {
    let LayerCache::Relu { input } = cache else {
        return Err(mismatch("relu", cache));
    };
    check_grad_shape(grad_out, input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Affine map `weights [M, N] · input [N] + bias [M]`.
pub fn fully_connected<'w, T: Scalar>(
    input: &Tensor<T>,
    weights: &'w Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LayerCache<'w, T>)> {
    let n = match input.shape()[..] {
        [n] => n,
        _ => {
            return Err(Error::shape(format!(
                "fully_connected input must be a vector, got {:?}",
                input.shape()
            )))
        }
    };
    let m = match weights.shape()[..] {
        [m, cols] if cols == n => m,
        _ => {
            return Err(Error::shape(format!(
                "weights {:?} incompatible with input length {n}",
                weights.shape()
            )))
        }
    };
    if bias.shape() != [m] {
        return Err(Error::shape(format!(
            "bias {:?} does not match {m} outputs",
            bias.shape()
        )));
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks_exact(n)
        .zip(bias.data())
        .map(|(row, &b)| b + dot(row, x))
        .collect();
    Ok((
        Tensor::new(vec![m], out)?,
        LayerCache::FullyConnected {
            input: input.clone(),
            weights,
        },
    ))
}

/// Gradients of a [`fully_connected`] call: `(grad_input, grad_weights, grad_bias)`.
pub fn fully_connected_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &LayerCache<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let LayerCache::FullyConnected { input, weights } = cache else {
        return Err(mismatch("fully_connected", cache));
    };
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    check_grad_shape(grad_out, &[m])?;
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n];
    let mut gw = vec![T::zero(); m * n];
    for ((row, grow), &gv) in weights.data().chunks_exact(n).zip(gw.chunks_exact_mut(n)).zip(g) {
        for ((d, &a), (dw, &v)) in gx.iter_mut().zip(row).zip(grow.iter_mut().zip(x)) {
            *d = *d + a * gv;
            *dw = gv * v;
        }
    }
    Ok((
        Tensor::new(vec![n], gx)?,
        Tensor::new(vec![m, n], gw)?,
        grad_out.clone(),
    ))
}

pub fn sigmoid<'w, T: Scalar>(input: &Tensor<T>) -> (Tensor<T>, LayerCache<'w, T>) {
    let out = input.map(|v| T::one() / (T::one() + (-v).exp()));
    (out.clone(), LayerCache::Sigmoid { output: out })
}

pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, cache: &LayerCache<'_, T>) -> Result<Tensor<T>> {
    let LayerCache::Sigmoid { output } = cache else {
        return Err(mismatch("sigmoid", cache));
    };
    check_grad_shape(grad_out, output.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &s)| g * s * (T::one() - s))
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

/// Softmax over a logit vector, evaluated in 64-bit with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> ClassDistribution {
    let z: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    ClassDistribution::from_raw(exps.into_iter().map(|e| e / total).collect())
}

/// Smallest probability fed to the logarithm in [`cross_entropy_loss`].
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Gradient with respect to the logits that produced the distribution.
    pub grad_logits: Tensor<f64>,
    /// Set when the true-class probability was below [`PROBABILITY_FLOOR`].
    pub clamped: bool,
}

/// Negative log-likelihood of `true_class` under a softmax output.
pub fn cross_entropy_loss(dist: &ClassDistribution, true_class: usize) -> Result<CrossEntropy> {
    if true_class >= dist.len() {
        return Err(Error::invalid(format!(
            "class {true_class} out of range for {} classes",
            dist.len()
        )));
    }
    let p = dist.get(true_class);
    let clamped = p < PROBABILITY_FLOOR;
    // NaN must survive the clamp so divergence stays visible.
    let loss = if p.is_nan() {
        f64::NAN
    } else {
        -p.max(PROBABILITY_FLOOR).ln()
    };
    let mut grad = dist.probs().to_vec();
    grad[true_class] -= 1.0;
    Ok(CrossEntropy {
        loss,
        grad_logits: Tensor::from_vec(grad)?,
        clamped,
    })
}

/// In-place `p ← p − lr·g` over paired parameter and gradient tensors.
///
/// All shapes are checked before any parameter changes.
pub fn sgd_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], learning_rate: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "parameter {i} has shape {:?} but its gradient has {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v = *v - learning_rate * d;
        }
    }
    Ok(())
}

/// Layer op under test in [`grad_check`], with its non-differentiable settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradCheckOp {
    /// Inputs: `[input, kernels, bias]`.
    Conv2d { padding: usize, stride: usize },
    /// Inputs: `[input]`.
    MaxPool2,
    /// Inputs: `[input]`.
    Relu,
    /// Inputs: `[input, weights, bias]`.
    FullyConnected,
    /// Inputs: `[input]`.
    Sigmoid,
    /// Inputs: `[logits]`; the objective is the loss itself.
    SoftmaxCrossEntropy { true_class: usize },
}

/// Magnitude below which [`relative_error`] stops dividing by the gradient size.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_CHECK_FLOOR)
}

/// Maximum relative error between analytic gradients and central finite
/// differences over every element of every input.
///
/// Ops producing a tensor are reduced to a scalar by a fixed pseudo-random
/// projection of their output, so every output element contributes.
pub fn grad_check(op: GradCheckOp, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-5).contains(&epsilon) {
        return Err(Error::invalid(format!("epsilon {epsilon} outside [1e-7, 1e-5]")));
    }
    let expected_inputs = match op {
        GradCheckOp::Conv2d { .. } | GradCheckOp::FullyConnected => 3,
        _ => 1,
    };
    if inputs.len() != expected_inputs {
        return Err(Error::invalid(format!(
            "{op:?} takes {expected_inputs} input tensors, got {}",
            inputs.len()
        )));
    }

    let (_, analytic) = objective_and_grads(op, inputs, true)?;
    let mut worst = 0.0_f64;
    let mut probe = inputs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..probe[t].len() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + epsilon;
            let (plus, _) = objective_and_grads(op, &probe, false)?;
            probe[t].data_mut()[i] = orig - epsilon;
            let (minus, _) = objective_and_grads(op, &probe, false)?;
            probe[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
    }
    Ok(worst)
}

fn projection(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ len as u64);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn project(out: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let r = projection(out.len());
    let value = out.data().iter().zip(&r).map(|(a, b)| a * b).sum();
    let grad = Tensor::new(out.shape().to_vec(), r).expect("projection matches output");
    (value, grad)
}

fn objective_and_grads(op: GradCheckOp, inputs: &[Tensor<f64>], want_grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    match op {
        GradCheckOp::Conv2d { padding, stride } => {
            let (out, cache) = conv2d(&inputs[0], &inputs[1], &inputs[2], padding, stride)?;
            let (value, g) = project(&out);
            if !want_grads {
                return Ok((value, Vec::new()));
            }
            let (gx, gk, gb) = conv2d_backward(&g, &cache)?;
            Ok((value, vec![gx, gk, gb]))
        }
        GradCheckOp::FullyConnected => {
            let (out, cache) = fully_connected(&inputs[0], &inputs[1], &inputs[2])?;
            let (value, g) = project(&out);
            if !want_grads {
                return Ok((value, Vec::new()));
            }
            let (gx, gw, gb) = fully_connected_backward(&g, &cache)?;
            Ok((value, vec![gx, gw, gb]))
        }
        GradCheckOp::MaxPool2 => {
            let (out, cache) = maxpool2(&inputs[0])?;
            let (value, g) = project(&out);
            let grads = if want_grads {
                vec![maxpool2_backward(&g, &cache)?]
            } else {
                Vec::new()
            };
            Ok((value, grads))
        }
        GradCheckOp::Relu => {
            let (out, cache) = relu(&inputs[0]);
            let (value, g) = project(&out);
            let grads = if want_grads {
                vec![relu_backward(&g, &cache)?]
            } else {
                Vec::new()
            };
            Ok((value, grads))
        }
        GradCheckOp::Sigmoid => {
            let (out, cache) = sigmoid(&inputs[0]);
            let (value, g) = project(&out);
            let grads = if want_grads {
                vec![sigmoid_backward(&g, &cache)?]
            } else {
                Vec::new()
            };
            Ok((value, grads))
        }
        GradCheckOp::SoftmaxCrossEntropy { true_class } => {
            if inputs[0].shape().len() != 1 {
                return Err(Error::shape("softmax logits must be a vector"));
            }
            let ce = cross_entropy_loss(&softmax(&inputs[0]), true_class)?;
            Ok((ce.loss, vec![ce.grad_logits]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
    }

    fn identity_kernel() -> Tensor<f64> {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        t(&[1, 1, 3, 3], &k)
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn conv_same_size_at_224() {
        let x = Tensor::<f32>::zeros(&[1, 224, 224]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros(&[1]);
        let (y, _) = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 224, 224]);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::zeros(&[2, 5, 5]);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let (y, _) = conv2d(&x, &k, &b, 1, 1).unwrap();
        for c in 0..3 {
            assert!(y.data()[c * 25..(c + 1) * 25].iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 4, 4], &mut rng);
        let k = identity_kernel();
        let b = Tensor::zeros(&[1]);
        let (y, cache) = conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y, x);
        let g = random(&[1, 4, 4], &mut rng);
        let (gx, _, _) = conv2d_backward(&g, &cache).unwrap();
        assert_eq!(gx, g);
    }

    #[test]
    fn conv_zero_grad_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 4, 4], &mut rng);
        let k = random(&[2, 2, 3, 3], &mut rng);
        let b = random(&[2], &mut rng);
        let (y, cache) = conv2d(&x, &k, &b, 1, 1).unwrap();
        let (gx, gk, gb) = conv2d_backward(&Tensor::zeros(y.shape()), &cache).unwrap();
        assert!(gx.data().iter().chain(gk.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &b, 1, 1).is_err());
        // (4 + 0 - 3) / 2 is not integral
        assert!(conv2d(&x, &Tensor::zeros(&[1, 2, 3, 3]), &b, 0, 2).is_err());
        let (_, pool_cache) = maxpool2::<f64>(&x).unwrap();
        let g = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(
            conv2d_backward(&g, &pool_cache),
            Err(Error::CacheMismatch {
                expected: "conv2d",
                found: "maxpool2"
            })
        ));
    }

    #[test]
    fn conv_no_padding_and_stride() {
        let x = Tensor::<f64>::filled(&[1, 7, 7], 1.0);
        let k = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(&[1]);
        let (y, _) = conv2d(&x, &k, &b, 0, 2).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
        let (y, _) = conv2d(&x, &k, &b, 1, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_matches_direct_sum() {
        // Naive six-loop reference with explicit zero padding.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ci, co, h, w) = (2, 3, 6, 5);
        let x = random(&[ci, h, w], &mut rng);
        let k = random(&[co, ci, 3, 3], &mut rng);
        let b = random(&[co], &mut rng);
        for (padding, stride) in [(1, 1), (0, 1), (1, 2)] {
            let Ok((y, _)) = conv2d(&x, &k, &b, padding, stride) else {
                continue;
            };
            let (ho, wo) = (y.shape()[1], y.shape()[2]);
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += k.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                            * x.data()[(c * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got = y.data()[(o * ho + oy) * wo + ox];
                        assert!((got - s).abs() < 1e-12, "{padding}/{stride}: {got} vs {s}");
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        let (y, cache) = maxpool2(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let gx = maxpool2_backward(&t(&[1, 1, 1], &[2.5]), &cache).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0, 0.0, 2.5]);

        let (_, cache) = maxpool2(&t(&[1, 2, 2], &[7.0; 4])).unwrap();
        let gx = maxpool2_backward(&t(&[1, 1, 1], &[3.0]), &cache).unwrap();
        assert_eq!(gx.data(), &[3.0, 0.0, 0.0, 0.0]);

        let (y, _) = maxpool2(&Tensor::<f32>::filled(&[1, 224, 224], 0.25)).unwrap();
        assert_eq!(y.shape(), &[1, 112, 112]);
        assert!(y.data().iter().all(|&v| v == 0.25));

        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
    }

    #[test]
    fn relu_examples() {
        let (y, _) = relu(&t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (_, cache) = relu(&t(&[2], &[-1.0, 2.0]));
        let g = relu_backward(&t(&[2], &[5.0, 7.0]), &cache).unwrap();
        assert_eq!(g.data(), &[0.0, 7.0]);
    }

    #[test]
    fn fully_connected_examples() {
        let eye = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = t(&[3], &[0.3, -2.0, 5.0]);
        let (y, _) = fully_connected(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
        let w = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bias = t(&[2], &[0.5, -0.5]);
        let (y, _) = fully_connected(&Tensor::zeros(&[3]), &w, &bias).unwrap();
        assert_eq!(y, bias);
        assert!(fully_connected(&Tensor::zeros(&[4]), &w, &bias).is_err());
    }

    #[test]
    fn sigmoid_examples() {
        let (y, _) = sigmoid(&t(&[2], &[0.0, 100.0]));
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn softmax_examples() {
        let d = softmax(&Tensor::<f64>::zeros(&[13]));
        assert!(d.probs().iter().all(|&p| (p - 1.0 / 13.0).abs() < 1e-15));
        let d = softmax(&t(&[2], &[1000.0, 0.0]));
        assert!((d.get(0) - 1.0).abs() < 1e-12 && d.get(1) < 1e-300 + 1e-12);
        assert!(d.probs().iter().all(|p| p.is_finite()));
        let d = softmax(&t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        for (p, e) in d.probs().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy_loss(&ClassDistribution::one_hot(13, 4), 4).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert!(!ce.clamped);
        let ce = cross_entropy_loss(&ClassDistribution::uniform(13), 0).unwrap();
        assert!((ce.loss - 13f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 2.5649).abs() < 1e-4);
        let ce = cross_entropy_loss(&ClassDistribution::one_hot(3, 0), 2).unwrap();
        assert!(ce.clamped);
        assert!((ce.loss - 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy_loss(&ClassDistribution::uniform(3), 3).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![t(&[1], &[1.0])];
        sgd_step(&mut p, &[t(&[1], &[2.0])], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        let before = p.clone();
        sgd_step(&mut p, &[t(&[1], &[123.0])], 0.0).unwrap();
        assert_eq!(p, before);
        assert!(sgd_step(&mut p, &[t(&[2], &[1.0, 1.0])], 0.1).is_err());
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_decreases_convex_toy_loss() {
        // L(p) = (p - 3)^2, dL/dp = 2(p - 3)
        let loss = |p: f64| (p - 3.0).powi(2);
        let mut p = vec![t(&[1], &[-1.0])];
        for _ in 0..5 {
            let before = loss(p[0].data()[0]);
            let g = t(&[1], &[2.0 * (p[0].data()[0] - 3.0)]);
            sgd_step(&mut p, &[g], 0.05).unwrap();
            assert!(loss(p[0].data()[0]) < before);
        }
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv_inputs = [
            random(&[1, 4, 4], &mut rng),
            random(&[1, 1, 3, 3], &mut rng),
            random(&[1], &mut rng),
        ];
        let err = grad_check(GradCheckOp::Conv2d { padding: 1, stride: 1 }, &conv_inputs, 1e-6).unwrap();
        assert!(err < 1e-4, "conv {err}");

        let fc_inputs = [
            random(&[3], &mut rng),
            random(&[2, 3], &mut rng),
            random(&[2], &mut rng),
        ];
        let err = grad_check(GradCheckOp::FullyConnected, &fc_inputs, 1e-6).unwrap();
        assert!(err < 1e-6, "fc {err}");

        let x = random(&[10], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let err = grad_check(GradCheckOp::Relu, &[x], 1e-6).unwrap();
        assert!(err < 1e-6, "relu {err}");

        let err = grad_check(GradCheckOp::Sigmoid, &[random(&[6], &mut rng)], 1e-6).unwrap();
        assert!(err < 1e-6, "sigmoid {err}");

        let err = grad_check(
            GradCheckOp::SoftmaxCrossEntropy { true_class: 2 },
            &[random(&[5], &mut rng)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax-ce {err}");
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        assert!(grad_check(GradCheckOp::Relu, &[Tensor::zeros(&[2])], 1e-3).is_err());
    }

    proptest! {
        #[test]
        fn conv_shape_algebra(c in 1usize..3, h in 1usize..12, w in 1usize..12,
                              co in 1usize..3, padding in 0usize..2, stride in 1usize..3) {
            let x = Tensor::<f64>::filled(&[c, h, w], 0.5);
            let k = Tensor::filled(&[co, c, 3, 3], 0.1);
            let b = Tensor::zeros(&[co]);
            match (conv_output_size(h, padding, stride), conv_output_size(w, padding, stride)) {
                (Ok(ho), Ok(wo)) => {
                    let (y, _) = conv2d(&x, &k, &b, padding, stride).unwrap();
                    prop_assert_eq!(y.shape(), &[co, ho, wo][..]);
                    prop_assert_eq!(ho, (h + 2 * padding - 3) / stride + 1);
                }
                _ => prop_assert!(conv2d(&x, &k, &b, padding, stride).is_err()),
            }
        }

        #[test]
        fn pool_shape_algebra(c in 1usize..3, h2 in 1usize..8, w2 in 1usize..8) {
            let x = Tensor::<f64>::filled(&[c, 2 * h2, 2 * w2], 1.0);
            let (y, _) = maxpool2(&x).unwrap();
            prop_assert_eq!(y.shape(), &[c, h2, w2][..]);
        }

        #[test]
        fn conv_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, bcoef in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[2, 5, 6], &mut rng);
            let y = random(&[2, 5, 6], &mut rng);
            let k = random(&[3, 2, 3, 3], &mut rng);
            let zero = Tensor::zeros(&[3]);
            let mut mix = x.map(|v| a * v);
            mix.add_assign(&y.map(|v| bcoef * v)).unwrap();
            let (lhs, _) = conv2d(&mix, &k, &zero, 1, 1).unwrap();
            let (cx, _) = conv2d(&x, &k, &zero, 1, 1).unwrap();
            let (cy, _) = conv2d(&y, &k, &zero, 1, 1).unwrap();
            for ((l, p), q) in lhs.data().iter().zip(cx.data()).zip(cy.data()) {
                prop_assert!((l - (a * p + bcoef * q)).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_is_a_distribution(logits in proptest::collection::vec(-15.0f64..15.0, 1..20)) {
            let d = softmax(&Tensor::from_vec(logits).unwrap());
            let total: f64 = d.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&p| p > 0.0 && p < 1.0 || d.len() == 1));
        }
    }
}

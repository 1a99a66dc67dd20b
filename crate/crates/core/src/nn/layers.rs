use rand::Rng;
use rayon::prelude::*;

use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Whether a forward pass records what backward needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A trainable parameter tensor with its gradient and Adagrad accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub accum: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "param shape/value mismatch");
        let n = value.len();
        Param {
            shape,
            value,
            grad: vec![T::zero(); n],
            accum: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Real>(&self) -> Param<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect();
        Param {
            shape: self.shape.clone(),
            value: conv(&self.value),
            grad: conv(&self.grad),
            accum: conv(&self.accum),
        }
    }
}

/// Kernel weights and per-output-channel bias of a (transposed) convolution.
///
/// Plain convolutions store weights as `(out, in, kh, kw)`. Transposed
/// convolutions store `(in, out, kh, kw)`, the layout of the convolution they
/// are the adjoint of.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> LayerParams<T> {
    /// Glorot-uniform weights, zero bias. `bias_len` is the output channel count.
    pub fn glorot(weight_dims: [usize; 4], bias_len: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor4::<T>::uniform(weight_dims, bound, rng);
        LayerParams {
            weights: Param::new(weight_dims.to_vec(), w.into_vec()),
            bias: Param::new(vec![bias_len], vec![T::zero(); bias_len]),
        }
    }

    pub fn from_values(weight_dims: [usize; 4], weights: Vec<T>, bias: Vec<T>) -> Self {
        LayerParams {
            weights: Param::new(weight_dims.to_vec(), weights),
            bias: Param::new(vec![bias.len()], bias),
        }
    }

    pub fn kernel_dims(&self) -> [usize; 4] {
        let s = &self.weights.shape;
        [s[0], s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate touched by output index `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

fn im2col<T: Real>(src: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            dst[oy * g.out_w + ox] = plane[iy * g.width + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Real>(cols_buf: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else { continue };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.width) {
                            plane[iy * g.width + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_geometry<T: Real>(input: &Tensor4<T>, kernel: [usize; 4], stride: usize, pad: usize) -> Result<Geometry> {
    let [cout, cin, kh, kw] = kernel;
    if cin != input.channels() {
        return Err(Error::invalid(format!(
            "conv expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    if cout == 0 || stride == 0 {
        return Err(Error::invalid("conv needs positive output channels and stride"));
    }
    let out_h = conv_out_len(input.height(), kh, stride, pad);
    let out_w = conv_out_len(input.width(), kw, stride, pad);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) if out_h > 0 && out_w > 0 => Ok(Geometry {
            channels: cin,
            height: input.height(),
            width: input.width(),
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        }),
        _ => Err(Error::invalid(format!(
            "conv {kh}x{kw} stride {stride} pad {pad} on {}x{} has no output",
            input.height(),
            input.width()
        ))),
    }
}

/// Geometry of the convolution whose adjoint is the transposed convolution.
fn transpose_geometry<T: Real>(input: &Tensor4<T>, kernel: [usize; 4], stride: usize, pad: usize) -> Result<Geometry> {
    let [cin, cout, kh, kw] = kernel;
    if cin != input.channels() {
        return Err(Error::invalid(format!(
            "transposed conv expects {cin} input channels, got {}",
            input.channels()
        )));
    }
    if cout == 0 || stride == 0 {
        return Err(Error::invalid("transposed conv needs positive output channels and stride"));
    }
    let out = |n: usize, k: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
    match (out(input.height(), kh), out(input.width(), kw)) {
        (Some(out_h), Some(out_w)) => Ok(Geometry {
            channels: cout,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
            pad,
            out_h: input.height(),
            out_w: input.width(),
        }),
        _ => Err(Error::invalid(format!(
            "transposed conv {kh}x{kw} stride {stride} pad {pad} on {}x{} has no output",
            input.height(),
            input.width()
        ))),
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

/// Cross-correlation with bias; output extent `(H + 2·pad − kH)/stride + 1` per axis.
pub fn conv2d_forward<T: Real>(input: &Tensor4<T>, params: &LayerParams<T>, stride: usize, padding: usize) -> Result<Tensor4<T>> {
    let kernel = params.kernel_dims();
    let g = conv_geometry(input, kernel, stride, padding)?;
    let cout = kernel[0];
    let k = g.col_rows();
    let p = g.col_cols();
    let w = &params.weights.value;
    let items: Vec<Vec<T>> = (0..input.batch())
        .into_par_iter()
        .map(|n| {
            let cols = im2col(input.item(n), &g);
            let mut out = vec![T::zero(); cout * p];
            T::gemm(cout, k, p, T::one(), w, (k as isize, 1), &cols, (p as isize, 1), T::zero(), &mut out, (p as isize, 1));
            add_bias(&mut out, &params.bias.value, p);
            out
        })
        .collect();
    Tensor4::from_vec([input.batch(), cout, g.out_h, g.out_w], items.concat())
}

/// Adjoint of [`conv2d_forward`] plus bias; output extent `(H − 1)·stride − 2·pad + kH`.
pub fn conv2d_transpose_forward<T: Real>(
    input: &Tensor4<T>,
    params: &LayerParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor4<T>> {
    let kernel = params.kernel_dims();
    let g = transpose_geometry(input, kernel, stride, padding)?;
    let cin = kernel[0];
    let k = g.col_rows();
    let p = g.col_cols();
    let w = &params.weights.value;
    let items: Vec<Vec<T>> = (0..input.batch())
        .into_par_iter()
        .map(|n| {
            let mut cols = vec![T::zero(); k * p];
            // cols = Wᵀ · x, with W stored as cin × k
            T::gemm(k, cin, p, T::one(), w, (1, k as isize), input.item(n), (p as isize, 1), T::zero(), &mut cols, (p as isize, 1));
            let mut out = col2im(&cols, &g);
            add_bias(&mut out, &params.bias.value, g.height * g.width);
            out
        })
        .collect();
    Tensor4::from_vec([input.batch(), g.channels, g.height, g.width], items.concat())
}

fn sum_planes<T: Real>(grad: &[T], plane: usize) -> Vec<T> {
    grad.chunks_exact(plane).map(|c| c.iter().copied().sum()).collect()
}

fn accumulate<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_grad_dims<T: Real>(grad: &Tensor4<T>, expected: [usize; 4]) -> Result<()> {
    if grad.dims() != expected {
        return Err(Error::invalid(format!(
            "upstream gradient {:?} does not match layer output {expected:?}",
            grad.dims()
        )));
    }
    Ok(())
}

fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a recorded training forward pass"))
}

/// Common interface of every layer in the engine.
pub trait Layer<T: Real> {
    /// Runs the layer. In [`Mode::Train`] the inputs needed by `backward` are recorded.
    fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>>;

    /// Inference-mode forward pass that leaves the layer untouched.
    fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>>;

    /// Consumes the recorded forward pass, accumulates parameter gradients and
    /// returns the gradient with respect to the input.
    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        Vec::new()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub params: LayerParams<T>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor4<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan = kernel * kernel;
        Self::from_params(
            LayerParams::glorot([out_channels, in_channels, kernel, kernel], out_channels, in_channels * fan, out_channels * fan, rng),
            stride,
            padding,
        )
    }

    pub fn from_params(params: LayerParams<T>, stride: usize, padding: usize) -> Self {
        Conv2d {
            params,
            stride,
            padding,
            cache: None,
        }
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let out = conv2d_forward(input, &self.params, self.stride, self.padding)?;
        if mode == Mode::Train {
            self.cache = Some(input.clone());
        }
        Ok(out)
    }

    fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_forward(input, &self.params, self.stride, self.padding)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let input = self.cache.take().ok_or_else(|| missing_forward("conv2d"))?;
        let kernel = self.params.kernel_dims();
        let g = conv_geometry(&input, kernel, self.stride, self.padding)?;
        let cout = kernel[0];
        check_grad_dims(grad, [input.batch(), cout, g.out_h, g.out_w])?;
        let k = g.col_rows();
        let p = g.col_cols();
        let w = &self.params.weights.value;
        let per_item: Vec<(Vec<T>, Vec<T>)> = (0..input.batch())
            .into_par_iter()
            .map(|n| {
                let cols = im2col(input.item(n), &g);
                let dy = grad.item(n);
                let mut dw = vec![T::zero(); cout * k];
                // dW = dY · colsᵀ
                T::gemm(cout, p, k, T::one(), dy, (p as isize, 1), &cols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
                let mut dcols = vec![T::zero(); k * p];
                // dcols = Wᵀ · dY
                T::gemm(k, cout, p, T::one(), w, (1, k as isize), dy, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
                (col2im(&dcols, &g), dw)
            })
            .collect();
        let mut dx = Vec::with_capacity(input.len());
        for (n, (dx_item, dw)) in per_item.into_iter().enumerate() {
            dx.extend(dx_item);
            accumulate(&mut self.params.weights.grad, &dw);
            accumulate(&mut self.params.bias.grad, &sum_planes(grad.item(n), p));
        }
        Tensor4::from_vec(input.dims(), dx)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.params.weights), ("bias", &self.params.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.params.weights), ("bias", &mut self.params.bias)]
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub params: LayerParams<T>,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor4<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan = kernel * kernel;
        Self::from_params(
            LayerParams::glorot([in_channels, out_channels, kernel, kernel], out_channels, in_channels * fan, out_channels * fan, rng),
            stride,
            padding,
        )
    }

    pub fn from_params(params: LayerParams<T>, stride: usize, padding: usize) -> Self {
        ConvTranspose2d {
            params,
            stride,
            padding,
            cache: None,
        }
    }
}

impl<T: Real> Layer<T> for ConvTranspose2d<T> {
    fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let out = conv2d_transpose_forward(input, &self.params, self.stride, self.padding)?;
        if mode == Mode::Train {
            self.cache = Some(input.clone());
        }
        Ok(out)
    }

    fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_transpose_forward(input, &self.params, self.stride, self.padding)
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let input = self.cache.take().ok_or_else(|| missing_forward("conv2d_transpose"))?;
        let kernel = self.params.kernel_dims();
        let g = transpose_geometry(&input, kernel, self.stride, self.padding)?;
        let cin = kernel[0];
        check_grad_dims(grad, [input.batch(), g.channels, g.height, g.width])?;
        let k = g.col_rows();
        let p = g.col_cols();
        let w = &self.params.weights.value;
        let per_item: Vec<(Vec<T>, Vec<T>)> = (0..input.batch())
            .into_par_iter()
            .map(|n| {
                let dcols = im2col(grad.item(n), &g);
                let x = input.item(n);
                let mut dx = vec![T::zero(); cin * p];
                // dX = W · dcols
                T::gemm(cin, k, p, T::one(), w, (k as isize, 1), &dcols, (p as isize, 1), T::zero(), &mut dx, (p as isize, 1));
                let mut dw = vec![T::zero(); cin * k];
                // dW = X · dcolsᵀ
                T::gemm(cin, p, k, T::one(), x, (p as isize, 1), &dcols, (1, p as isize), T::zero(), &mut dw, (k as isize, 1));
                (dx, dw)
            })
            .collect();
        let plane = g.height * g.width;
        let mut dx = Vec::with_capacity(input.len());
        for (n, (dx_item, dw)) in per_item.into_iter().enumerate() {
            dx.extend(dx_item);
            accumulate(&mut self.params.weights.grad, &dw);
            accumulate(&mut self.params.bias.grad, &sum_planes(grad.item(n), plane));
        }
        Tensor4::from_vec(input.dims(), dx)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("weight", &self.params.weights), ("bias", &self.params.bias)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("weight", &mut self.params.weights), ("bias", &mut self.params.bias)]
    }
}

/// Default running-statistics momentum (`running = m·running + (1 − m)·batch`).
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Per-channel affine normalisation parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub scale: Param<T>,
    pub shift: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            scale: Param::new(vec![channels], vec![T::one(); channels]),
            shift: Param::new(vec![channels], vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(BN_MOMENTUM),
            epsilon: T::lit(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Tensor4<T>,
    inv_std: Vec<T>,
}

fn bn_check<T: Real>(input: &Tensor4<T>, state: &BatchNormState<T>) -> Result<()> {
    if input.channels() != state.channels() {
        return Err(Error::invalid(format!(
            "batch norm has {} channels, input has {}",
            state.channels(),
            input.channels()
        )));
    }
    Ok(())
}

fn bn_batch_forward<T: Real>(input: &Tensor4<T>, state: &mut BatchNormState<T>) -> (Tensor4<T>, BnCache<T>) {
    let [batch, channels, _, _] = input.dims();
    let plane = input.plane_len();
    let count = T::from_usize(batch * plane).expect("count fits");
    let values = input.as_slice();
    let mut normalized = Tensor4::zeros(input.dims());
    let mut out = Tensor4::zeros(input.dims());
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let planes = || (0..batch).map(move |n| (n * channels + c) * plane);
        let mut sum = T::zero();
        for start in planes() {
            sum += values[start..start + plane].iter().copied().sum::<T>();
        }
        let mean = sum / count;
        let mut sq = T::zero();
        for start in planes() {
            sq += values[start..start + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        let var = sq / count;
        let istd = T::one() / (var + state.epsilon).sqrt();
        let (gamma, beta) = (state.scale.value[c], state.shift.value[c]);
        for start in planes() {
            for i in start..start + plane {
                let xhat = (values[i] - mean) * istd;
                normalized.as_mut_slice()[i] = xhat;
                out.as_mut_slice()[i] = gamma * xhat + beta;
            }
        }
        let m = state.momentum;
        state.running_mean[c] = m * state.running_mean[c] + (T::one() - m) * mean;
        state.running_var[c] = m * state.running_var[c] + (T::one() - m) * var;
        inv_std.push(istd);
    }
    (out, BnCache { normalized, inv_std })
}

fn bn_infer<T: Real>(input: &Tensor4<T>, state: &BatchNormState<T>) -> Tensor4<T> {
    let channels = input.channels();
    let plane = input.plane_len();
    let mut out = input.clone();
    for (idx, chunk) in out.as_mut_slice().chunks_exact_mut(plane).enumerate() {
        let c = idx % channels;
        let istd = T::one() / (state.running_var[c] + state.epsilon).sqrt();
        let (gamma, beta, mean) = (state.scale.value[c], state.shift.value[c], state.running_mean[c]);
        chunk.iter_mut().for_each(|v| *v = gamma * (*v - mean) * istd + beta);
    }
    out
}

/// Batch normalisation. Training mode normalises with batch statistics and
/// updates the running averages; inference mode uses the running averages.
pub fn batchnorm_forward<T: Real>(input: &Tensor4<T>, state: &mut BatchNormState<T>, training: bool) -> Result<Tensor4<T>> {
    bn_check(input, state)?;
    Ok(if training {
        bn_batch_forward(input, state).0
    } else {
        bn_infer(input, state)
    })
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub state: BatchNormState<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self::from_state(BatchNormState::new(channels))
    }

    pub fn from_state(state: BatchNormState<T>) -> Self {
        BatchNorm2d { state, cache: None }
    }
}

impl<T: Real> Layer<T> for BatchNorm2d<T> {
    fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        bn_check(input, &self.state)?;
        match mode {
            Mode::Train => {
                let (out, cache) = bn_batch_forward(input, &mut self.state);
                self.cache = Some(cache);
                Ok(out)
            }
            Mode::Infer => Ok(bn_infer(input, &self.state)),
        }
    }

    fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        bn_check(input, &self.state)?;
        Ok(bn_infer(input, &self.state))
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let BnCache { normalized, inv_std } = self.cache.take().ok_or_else(|| missing_forward("batch_norm"))?;
        check_grad_dims(grad, normalized.dims())?;
        let [batch, channels, _, _] = normalized.dims();
        let plane = normalized.plane_len();
        let count = T::from_usize(batch * plane).expect("count fits");
        let xhat = normalized.as_slice();
        let dy = grad.as_slice();
        let mut dx = Tensor4::zeros(normalized.dims());
        for c in 0..channels {
            let starts: Vec<usize> = (0..batch).map(|n| (n * channels + c) * plane).collect();
            let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
            for &s in &starts {
                for i in s..s + plane {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * xhat[i];
                }
            }
            self.state.scale.grad[c] += sum_dy_xhat;
            self.state.shift.grad[c] += sum_dy;
            let gamma = self.state.scale.value[c];
            let k = gamma * inv_std[c] / count;
            for &s in &starts {
                for i in s..s + plane {
                    dx.as_mut_slice()[i] = k * (count * dy[i] - sum_dy - xhat[i] * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }

    fn params(&self) -> Vec<(&'static str, &Param<T>)> {
        vec![("scale", &self.state.scale), ("shift", &self.state.shift)]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Param<T>)> {
        vec![("scale", &mut self.state.scale), ("shift", &mut self.state.shift)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Tanh,
    Sigmoid,
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation_forward<T: Real>(input: &Tensor4<T>, kind: ActivationKind) -> Tensor4<T> {
    match kind {
        ActivationKind::Tanh => input.map(|v| v.tanh()),
        ActivationKind::Sigmoid => input.map(sigmoid),
    }
}

#[derive(Debug, Clone)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    cache: Option<Tensor4<T>>,
}

impl<T: Real> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, cache: None }
    }
}

impl<T: Real> Layer<T> for Activation<T> {
    fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let out = activation_forward(input, self.kind);
        if mode == Mode::Train {
            self.cache = Some(out.clone());
        }
        Ok(out)
    }

    fn infer(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(activation_forward(input, self.kind))
    }

    fn backward(&mut self, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out = self.cache.take().ok_or_else(|| missing_forward("activation"))?;
        check_grad_dims(grad, out.dims())?;
        let data = out
            .as_slice()
            .iter()
            .zip(grad.as_slice())
            .map(|(&y, &g)| match self.kind {
                ActivationKind::Tanh => g * (T::one() - y * y),
                ActivationKind::Sigmoid => g * y * (T::one() - y),
            })
            .collect();
        Tensor4::from_vec(out.dims(), data)
    }
}

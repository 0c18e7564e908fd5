//! Dense CPU kernels: convolution, pooling, a small perceptron with
//! backprop, channel softmax, and a central-difference gradient checker.
//!
//! Tensors are channel-major `C x H x W` in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        if data.len() != channels * height * width {
            return Err(TensorError::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Stacks `parts` along the channel axis.
    pub fn concat(parts: &[&FeatureMap]) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Shape("concat of nothing".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(TensorError::Shape(format!(
                    "concat of {}x{} onto {h}x{w}",
                    p.height, p.width
                )));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(Self {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn add(&self, other: &FeatureMap) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &FeatureMap) -> Result<Self, TensorError> {
        self.zip_with(other, |a, b| a * b)
    }

    fn zip_with(&self, other: &FeatureMap, f: impl Fn(f64, f64) -> f64) -> Result<Self, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::Shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    /// Per-pixel index of the largest channel; ties keep the lowest index.
    pub fn argmax_channels(&self) -> Vec<usize> {
        let n = self.plane_len();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.channels {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => logistic(v),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn logistic(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Deterministic parameter initialization. Values are drawn as `f32` and
/// widened so that checkpoints (stored as float32) round-trip exactly.
pub struct SeededInit {
    rng: ChaCha8Rng,
}

impl SeededInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        let b = bound as f32;
        (0..n).map(|_| self.rng.random_range(-b..=b) as f64).collect()
    }

    /// He-uniform bound for a layer with `fan_in` inputs.
    pub fn he(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        self.uniform(n, (6.0 / fan_in.max(1) as f64).sqrt())
    }
}

/// Convolution filter bank, `out x in x kh x kw` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub data: Vec<f64>,
}

impl ConvKernel {
    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![0.0; out_channels * in_channels * kh * kw],
        }
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[((o * self.in_channels + i) * self.kh + ky) * self.kw + kx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvOpts {
    /// Stride 1 with the padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }
}

fn conv_out_dim(n: usize, k: usize, opts: ConvOpts) -> Option<usize> {
    let span = opts.dilation * (k - 1) + 1;
    let padded = n + 2 * opts.padding;
    (padded >= span).then(|| (padded - span) / opts.stride + 1)
}

pub fn conv2d(
    input: &FeatureMap,
    kernel: &ConvKernel,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Result<FeatureMap, TensorError> {
    conv2d_with(
        input,
        kernel,
        bias,
        ConvOpts {
            stride,
            padding,
            dilation: 1,
        },
    )
}

/// Zero-padded cross-correlation. Each output cell accumulates
/// `bias + sum over (in channel, ky, kx)` in that fixed order.
pub fn conv2d_with(
    input: &FeatureMap,
    kernel: &ConvKernel,
    bias: &[f64],
    opts: ConvOpts,
) -> Result<FeatureMap, TensorError> {
    if kernel.in_channels != input.channels {
        return Err(TensorError::Shape(format!(
            "kernel expects {} input channels, map has {}",
            kernel.in_channels, input.channels
        )));
    }
    if bias.len() != kernel.out_channels {
        return Err(TensorError::Shape(format!(
            "{} biases for {} output channels",
            bias.len(),
            kernel.out_channels
        )));
    }
    if opts.stride == 0 || opts.dilation == 0 || kernel.kh == 0 || kernel.kw == 0 {
        return Err(TensorError::Shape("zero stride, dilation or kernel size".into()));
    }
    let (h, w) = (input.height, input.width);
    let (oh, ow) = match (
        conv_out_dim(h, kernel.kh, opts),
        conv_out_dim(w, kernel.kw, opts),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::Shape(format!(
                "{}x{} kernel does not fit a padded {h}x{w} map",
                kernel.kh, kernel.kw
            )))
        }
    };
    let mut out = FeatureMap::zeros(kernel.out_channels, oh, ow);
    let (s, p, d) = (opts.stride as isize, opts.padding as isize, opts.dilation as isize);

    out.data
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(o, plane)| {
            plane.fill(bias[o]);
            for i in 0..kernel.in_channels {
                let src = input.channel(i);
                for ky in 0..kernel.kh {
                    for kx in 0..kernel.kw {
                        let wv = kernel.at(o, i, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        let x_off = kx as isize * d - p;
                        // Output columns whose input column lies inside [0, w).
                        let lo = if x_off >= 0 { 0 } else { ((-x_off + s - 1) / s) as usize };
                        let hi_raw = (w as isize - x_off + s - 1) / s;
                        let hi = (hi_raw.max(0) as usize).min(ow);
                        if lo >= hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize * d - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let start = (lo as isize + x_off) as usize;
                                let src_seg = &row[start..start + (hi - lo)];
                                for (a, b) in dst[lo..hi].iter_mut().zip(src_seg) {
                                    *a += wv * b;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst[ox] += wv * row[(ox as isize * s + x_off) as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Max pooling where padding cells contribute `pad_value`.
pub fn max_pool2d(
    input: &FeatureMap,
    window: usize,
    stride: usize,
    padding: usize,
    pad_value: f64,
) -> Result<FeatureMap, TensorError> {
    if window == 0 || stride == 0 {
        return Err(TensorError::Shape("zero pooling window or stride".into()));
    }
    let opts = ConvOpts {
        stride,
        padding,
        dilation: 1,
    };
    let (h, w) = (input.height, input.width);
    let (oh, ow) = match (conv_out_dim(h, window, opts), conv_out_dim(w, window, opts)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::Shape(format!(
                "window {window} does not fit a padded {h}x{w} map"
            )))
        }
    };
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            pad_value
                        } else {
                            src[iy as usize * w + ix as usize]
                        };
                        m = m.max(v);
                    }
                }
                dst[oy * ow + ox] = m;
            }
        }
    }
    Ok(out)
}

/// Keeps every `factor`-th row and column starting at 0.
pub fn subsample(input: &FeatureMap, factor: usize) -> FeatureMap {
    let (oh, ow) = (input.height.div_ceil(factor), input.width.div_ceil(factor));
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                out.data[(c * oh + y) * ow + x] = input.at(c, y * factor, x * factor);
            }
        }
    }
    out
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(input: &FeatureMap, factor: usize) -> FeatureMap {
    let (oh, ow) = (input.height * factor, input.width * factor);
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                out.data[(c * oh + y) * ow + x] = input.at(c, y / factor, x / factor);
            }
        }
    }
    out
}

pub fn relu(input: &FeatureMap) -> FeatureMap {
    input.map(|v| v.max(0.0))
}

/// Per-pixel softmax across channels, with max subtraction.
pub fn softmax_channels(input: &FeatureMap) -> FeatureMap {
    let n = input.plane_len();
    let c = input.channels;
    let mut out = input.clone();
    for i in 0..n {
        let max = (0..c).map(|k| input.data[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (input.data[k * n + i] - max).exp();
            out.data[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            out.data[k * n + i] /= sum;
        }
    }
    out
}

/// Fully connected layer; `weight` is `outputs x inputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let z = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            out.push(self.activation.apply(z));
        }
    }
}

/// Shared multi-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePerceptron {
    pub layers: Vec<DenseLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DensePerceptron {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self, TensorError> {
        if layers.is_empty() {
            return Err(TensorError::Shape("perceptron without layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(TensorError::Shape(format!("layer {k} has inconsistent buffers")));
            }
            if k > 0 && layers[k - 1].outputs != l.inputs {
                return Err(TensorError::Shape(format!(
                    "layer {k} takes {} inputs but previous layer emits {}",
                    l.inputs,
                    layers[k - 1].outputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Layers of widths `dims[0] -> dims[1] -> ...` with He-uniform weights
    /// and zero biases.
    pub fn seeded(dims: &[usize], activations: &[Activation], init: &mut SeededInit) -> Self {
        assert_eq!(dims.len(), activations.len() + 1);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| DenseLayer {
                inputs: d[0],
                outputs: d[1],
                weight: init.he(d[0] * d[1], d[0]),
                bias: vec![0.0; d[1]],
                activation,
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Allocation-free forward pass; the result ends up in `out`.
    pub fn forward_into(&self, x: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(x);
        for l in &self.layers {
            std::mem::swap(out, scratch);
            l.forward_into(scratch, out);
        }
    }

    /// Forward pass that keeps every layer's output for [`Self::backward`].
    /// Index 0 holds the input.
    pub fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        for l in &self.layers {
            let mut out = Vec::with_capacity(l.outputs);
            l.forward_into(trace.last().unwrap(), &mut out);
            trace.push(out);
        }
        trace
    }

    pub fn zero_grads(&self) -> Vec<DenseLayerGrad> {
        self.layers
            .iter()
            .map(|l| DenseLayerGrad {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grads` given the gradient of
    /// the output; returns the gradient with respect to the input.
    pub fn backward(
        &self,
        trace: &[Vec<f64>],
        grad_output: &[f64],
        grads: &mut [DenseLayerGrad],
    ) -> Vec<f64> {
        let mut upstream = grad_output.to_vec();
        for (k, l) in self.layers.iter().enumerate().rev() {
            let input = &trace[k];
            let output = &trace[k + 1];
            let dz: Vec<f64> = upstream
                .iter()
                .zip(output)
                .map(|(&g, &y)| g * l.activation.derivative_from_output(y))
                .collect();
            let g = &mut grads[k];
            let mut dx = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                g.bias[o] += dz[o];
                let row = o * l.inputs;
                for i in 0..l.inputs {
                    g.weight[row + i] += dz[o] * input[i];
                    dx[i] += dz[o] * l.weight[row + i];
                }
            }
            upstream = dx;
        }
        upstream
    }
}

pub fn perceptron_forward(p: &DensePerceptron, x: &[f64]) -> Result<Vec<f64>, TensorError> {
    if x.len() != p.input_dim() {
        return Err(TensorError::Shape(format!(
            "perceptron expects {} inputs, got {}",
            p.input_dim(),
            x.len()
        )));
    }
    let (mut out, mut scratch) = (Vec::new(), Vec::new());
    p.forward_into(x, &mut out, &mut scratch);
    Ok(out)
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>, TensorError> {
    if !(eps > 0.0) {
        return Err(TensorError::NonFinite(format!("step {eps} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite(format!("f evaluated to a non-finite value near coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

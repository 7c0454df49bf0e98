//! Feed-forward layers over flat `f64` buffers with hand-written backward
//! passes. Parameters live outside the network in one flat vector; each
//! layer owns a contiguous range of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Elu,
    Tanh,
    Sigmoid,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "linear" => Activation::Identity,
            "relu" => Activation::Relu,
            "leaky_relu" => Activation::LeakyRelu,
            "elu" => Activation::Elu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            _ => return Err(Error::Config(format!("unknown activation {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// 3x3 convolution, stride 1, zero padding 1, channel-major layout.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
    },
    /// Nearest-neighbour 2x upsampling of a `channels x height x width` map.
    Upsample2x {
        channels: usize,
        height: usize,
        width: usize,
    },
    Act {
        kind: Activation,
        len: usize,
    },
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv3x3 {
                in_channels,
                height,
                width,
                ..
            } => in_channels * height * width,
            Layer::Upsample2x {
                channels,
                height,
                width,
            } => channels * height * width,
            Layer::Act { len, .. } => len,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Conv3x3 {
                out_channels,
                height,
                width,
                ..
            } => out_channels * height * width,
            Layer::Upsample2x {
                channels,
                height,
                width,
            } => channels * height * width * 4,
            Layer::Act { len, .. } => len,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs } => inputs * outputs + outputs,
            Layer::Conv3x3 {
                in_channels,
                out_channels,
                ..
            } => out_channels * in_channels * 9 + out_channels,
            _ => 0,
        }
    }

    /// Glorot-uniform weights and zero biases.
    fn init(&self, params: &mut [f64], rng: &mut RngStream) {
        let (fan_in, fan_out, n_weights) = match *self {
            Layer::Dense { inputs, outputs } => (inputs, outputs, inputs * outputs),
            Layer::Conv3x3 {
                in_channels,
                out_channels,
                ..
            } => (in_channels * 9, out_channels * 9, in_channels * out_channels * 9),
            _ => return,
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut params[..n_weights] {
            *w = (2.0 * rng.unit() - 1.0) * limit;
        }
        for b in &mut params[n_weights..] {
            *b = 0.0;
        }
    }

    fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        match *self {
            Layer::Dense { inputs, outputs } => {
                let (w, b) = params.split_at(inputs * outputs);
                for o in 0..outputs {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    out[o] = b[o] + dot(row, x);
                }
            }
            Layer::Conv3x3 {
                in_channels,
                out_channels,
                height,
                width,
            } => {
                let plane = height * width;
                let (w, b) = params.split_at(out_channels * in_channels * 9);
                for oc in 0..out_channels {
                    let o = &mut out[oc * plane..(oc + 1) * plane];
                    o.fill(b[oc]);
                    for ic in 0..in_channels {
                        let input = &x[ic * plane..(ic + 1) * plane];
                        let k = &w[(oc * in_channels + ic) * 9..(oc * in_channels + ic + 1) * 9];
                        for_each_tap(height, width, |tap, r_out, r_in, c_out, c_in, len| {
                            let kw = k[tap];
                            let dst = &mut o[r_out * width + c_out..r_out * width + c_out + len];
                            let src = &input[r_in * width + c_in..r_in * width + c_in + len];
                            axpy(kw, src, dst);
                        });
                    }
                }
            }
            Layer::Upsample2x {
                channels,
                height,
                width,
            } => {
                let w2 = width * 2;
                for ch in 0..channels {
                    for r in 0..height * 2 {
                        let src = &x[ch * height * width + (r / 2) * width..][..width];
                        let dst = &mut out[ch * height * width * 4 + r * w2..][..w2];
                        for (c, d) in dst.iter_mut().enumerate() {
                            *d = src[c / 2];
                        }
                    }
                }
            }
            Layer::Act { kind, .. } => {
                for (o, &v) in out.iter_mut().zip(x) {
                    *o = kind.apply(v);
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad_params` and writes the
    /// gradient with respect to the input into `grad_in`.
    fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        y: &[f64],
        grad_out: &[f64],
        grad_params: &mut [f64],
        grad_in: &mut [f64],
    ) {
        match *self {
            Layer::Dense { inputs, outputs } => {
                let (w, _) = params.split_at(inputs * outputs);
                let (gw, gb) = grad_params.split_at_mut(inputs * outputs);
                grad_in.fill(0.0);
                for o in 0..outputs {
                    let g = grad_out[o];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    axpy(g, x, &mut gw[o * inputs..(o + 1) * inputs]);
                    axpy(g, &w[o * inputs..(o + 1) * inputs], grad_in);
                }
            }
            Layer::Conv3x3 {
                in_channels,
                out_channels,
                height,
                width,
            } => {
                let plane = height * width;
                let n_w = out_channels * in_channels * 9;
                let (w, _) = params.split_at(n_w);
                let (gw, gb) = grad_params.split_at_mut(n_w);
                grad_in.fill(0.0);
                for oc in 0..out_channels {
                    let g = &grad_out[oc * plane..(oc + 1) * plane];
                    gb[oc] += g.iter().sum::<f64>();
                    for ic in 0..in_channels {
                        let base = (oc * in_channels + ic) * 9;
                        let input = &x[ic * plane..(ic + 1) * plane];
                        let gi = &mut grad_in[ic * plane..(ic + 1) * plane];
                        let k = &w[base..base + 9];
                        let gk = &mut gw[base..base + 9];
                        for_each_tap(height, width, |tap, r_out, r_in, c_out, c_in, len| {
                            let go = &g[r_out * width + c_out..r_out * width + c_out + len];
                            let src = &input[r_in * width + c_in..r_in * width + c_in + len];
                            gk[tap] += dot(go, src);
                            axpy(k[tap], go, &mut gi[r_in * width + c_in..r_in * width + c_in + len]);
                        });
                    }
                }
            }
            Layer::Upsample2x {
                channels,
                height,
                width,
            } => {
                grad_in.fill(0.0);
                let w2 = width * 2;
                for ch in 0..channels {
                    for r in 0..height * 2 {
                        let src = &grad_out[ch * height * width * 4 + r * w2..][..w2];
                        let dst = &mut grad_in[ch * height * width + (r / 2) * width..][..width];
                        for (c, g) in src.iter().enumerate() {
                            dst[c / 2] += g;
                        }
                    }
                }
            }
            Layer::Act { kind, .. } => {
                for i in 0..grad_in.len() {
                    grad_in[i] = grad_out[i] * kind.derivative(x[i], y[i]);
                }
            }
        }
    }
}

/// Visits the nine taps of a 3x3 kernel with zero padding. For each tap and
/// output row the callback receives `(tap, out_row, in_row, out_col,
/// in_col, run_length)` describing a contiguous run of valid columns.
#[inline]
fn for_each_tap(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for kr in 0..3 {
        for kc in 0..3 {
            let tap = kr * 3 + kc;
            // output columns c with 0 <= c + kc - 1 < width
            let (c_out, c_in, len) = match kc {
                0 => (1, 0, width.saturating_sub(1)),
                1 => (0, 0, width),
                _ => (0, 1, width.saturating_sub(1)),
            };
            if len == 0 {
                continue;
            }
            let (r_lo, r_hi) = match kr {
                0 => (1, height),
                1 => (0, height),
                _ => (0, height.saturating_sub(1)),
            };
            for r_out in r_lo..r_hi {
                let r_in = r_out + kr - 1;
                f(tap, r_out, r_in, c_out, c_in, len);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[i * 4 + j] * b[i * 4 + j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Stored forward activations; `values[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    pub values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace holds the input at least")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    n_params: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network without layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::Shape(format!(
                    "layer output {} feeds input {}",
                    pair[0].output_len(),
                    pair[1].input_len()
                )));
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut n_params = 0;
        for layer in &layers {
            offsets.push(n_params);
            n_params += layer.param_count();
        }
        Ok(Self {
            layers,
            offsets,
            n_params,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers[self.layers.len() - 1].output_len()
    }

    pub fn param_range(&self, layer: usize) -> std::ops::Range<usize> {
        let start = self.offsets[layer];
        start..start + self.layers[layer].param_count()
    }

    pub fn init_params(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.init(&mut params[self.param_range(i)], rng);
        }
        params
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Trace {
        debug_assert_eq!(params.len(), self.n_params);
        debug_assert_eq!(input.len(), self.input_len());
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.output_len()];
            layer.forward(&params[self.param_range(i)], &values[i], &mut out);
            values.push(out);
        }
        Trace { values }
    }

    /// Output only, without keeping intermediate activations around.
    pub fn infer(&self, params: &[f64], input: &[f64]) -> Vec<f64> {
        let mut current = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.output_len()];
            layer.forward(&params[self.param_range(i)], &current, &mut out);
            current = out;
        }
        current
    }

    /// Backpropagates `grad_output`, accumulating into `grad_params`, and
    /// returns the gradient with respect to the network input.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad_output: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        let mut grad = grad_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut grad_in = vec![0.0; layer.input_len()];
            let range = self.param_range(i);
            layer.backward(
                &params[range.clone()],
                &trace.values[i],
                &trace.values[i + 1],
                &grad,
                &mut grad_params[range],
                &mut grad_in,
            );
            grad = grad_in;
        }
        grad
    }
}

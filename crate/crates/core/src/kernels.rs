//! Float reference and int8 implementations of every layer type in the
//! network: convolution, squeeze-and-excitation, 2x2 max pooling, nearest
//! 2x upsampling, channel concatenation and leaky ReLU.
//!
//! The int8 kernels accumulate in `i32` and leave the integer domain only
//! through [`requantize`], so they are bit-exact across platforms and between
//! the sequential and parallel execution paths.

use rayon::prelude::*;

use crate::qtensor::{
    requantize, FloatTensor, QuantParams, QuantizedTensor, Requantizer, TensorShape,
};
use crate::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.1;
pub const DEFAULT_SE_REDUCTION: usize = 4;

/// Fixed-point one for the SE gate table.
const GATE_ONE: i32 = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Linear,
    LeakyRelu(f32),
}

impl Activation {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output extent under same padding.
    pub fn output_shape(&self, input: TensorShape) -> TensorShape {
        TensorShape {
            channels: self.out_channels,
            height: input.height.div_ceil(self.stride),
            width: input.width.div_ceil(self.stride),
        }
    }

    pub fn macs(&self, input: TensorShape) -> u64 {
        let out = self.output_shape(input);
        (self.kernel * self.kernel * self.in_channels) as u64 * out.numel() as u64
    }

    fn check_input(&self, input: TensorShape) -> Result<()> {
        if input.channels != self.in_channels {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: self.in_channels,
                actual: input.channels,
            });
        }
        Ok(())
    }
}

/// `k*k*in*out + out`: weights plus one bias per output channel.
pub fn param_count(g: &ConvGeometry) -> usize {
    g.weight_len() + g.out_channels
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub geometry: ConvGeometry,
    /// `(out, in, k, k)` row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn new(
        geometry: ConvGeometry,
        weights: Vec<f32>,
        bias: Vec<f32>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.len() != geometry.weight_len() || bias.len() != geometry.out_channels {
            return Err(Error::InvalidShape(format!(
                "conv {}x{} {}->{}: {} weights / {} biases",
                geometry.kernel,
                geometry.kernel,
                geometry.in_channels,
                geometry.out_channels,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            geometry,
            weights,
            bias,
            activation,
        })
    }
}

/// Int8 convolution: symmetric per-output-channel weights, `i32` biases in
/// units of `input_scale * weight_scale[o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QConvSpec {
    pub geometry: ConvGeometry,
    pub weights: Vec<i8>,
    pub weight_scales: Vec<f32>,
    pub bias: Vec<i32>,
    pub activation: Activation,
    pub output: QuantParams,
}

impl QConvSpec {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if self.weights.len() != g.weight_len()
            || self.bias.len() != g.out_channels
            || self.weight_scales.len() != g.out_channels
        {
            return Err(Error::InvalidShape(format!(
                "int8 conv {}->{}: {} weights / {} biases / {} scales",
                g.in_channels,
                g.out_channels,
                self.weights.len(),
                self.bias.len(),
                self.weight_scales.len()
            )));
        }
        Ok(())
    }
}

/// Maps an `i32` accumulator to int8 through the activation function.
#[derive(Debug, Clone, Copy)]
pub struct OutputStage {
    positive: Requantizer,
    negative: Option<Requantizer>,
    linear: bool,
    zero_point: i32,
}

impl OutputStage {
    /// `acc_scale` is the real value of one accumulator unit.
    pub fn new(acc_scale: f64, activation: Activation, output: QuantParams) -> Result<Self> {
        let ratio = acc_scale / output.scale as f64;
        let positive = Requantizer::new(ratio)?;
        let (negative, linear) = match activation {
            Activation::Linear => (None, true),
            Activation::LeakyRelu(slope) if slope > 0.0 => {
                (Some(Requantizer::new(ratio * slope as f64)?), false)
            }
            Activation::LeakyRelu(_) => (None, false),
        };
        Ok(Self {
            positive,
            negative,
            linear,
            zero_point: output.zero_point,
        })
    }

    #[inline]
    pub fn apply(&self, acc: i32) -> i8 {
        if acc >= 0 || self.linear {
            requantize(acc, &self.positive, self.zero_point)
        } else {
            match &self.negative {
                Some(n) => requantize(acc, n, self.zero_point),
                None => self.zero_point as i8,
            }
        }
    }
}

fn pad_plane<T: Copy, U: Copy>(
    input: &[T],
    shape: TensorShape,
    pad: usize,
    fill: U,
    map: impl Fn(T) -> U,
) -> (Vec<U>, usize, usize) {
    let ph = shape.height + 2 * pad;
    let pw = shape.width + 2 * pad;
    let mut out = vec![fill; shape.channels * ph * pw];
    for c in 0..shape.channels {
        for y in 0..shape.height {
            let src = &input[(c * shape.height + y) * shape.width..][..shape.width];
            let dst = &mut out[(c * ph + y + pad) * pw + pad..][..shape.width];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = map(s);
            }
        }
    }
    (out, ph, pw)
}

/// Accumulates one output channel: `acc[oy, ox] += sum w * x` over the padded input.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_channel<W, X, A>(
    acc: &mut [A],
    weights: &[W],
    padded: &[X],
    g: &ConvGeometry,
    ph: usize,
    pw: usize,
    out: TensorShape,
) where
    W: Copy + Into<A>,
    X: Copy + Into<A>,
    A: Copy + std::ops::Mul<Output = A> + std::ops::AddAssign + Default + PartialEq,
{
    let k = g.kernel;
    let s = g.stride;
    for ci in 0..g.in_channels {
        let plane = &padded[ci * ph * pw..(ci + 1) * ph * pw];
        for ky in 0..k {
            for kx in 0..k {
                let w: A = weights[(ci * k + ky) * k + kx].into();
                if w == A::default() {
                    continue;
                }
                for oy in 0..out.height {
                    let row = &plane[(oy * s + ky) * pw + kx..];
                    let dst = &mut acc[oy * out.width..(oy + 1) * out.width];
                    if s == 1 {
                        for (d, &x) in dst.iter_mut().zip(row) {
                            *d += w * x.into();
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d += w * row[ox * s].into();
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &FloatTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    conv2d_exec(input, spec, Exec::Sequential)
}

pub fn conv2d_exec(input: &FloatTensor, spec: &ConvSpec, exec: Exec) -> Result<FloatTensor> {
    let g = &spec.geometry;
    g.check_input(input.shape())?;
    let out_shape = g.output_shape(input.shape());
    let (padded, ph, pw) = pad_plane(input.data(), input.shape(), g.padding(), 0f32, |x| x);
    let per_out = g.in_channels * g.kernel * g.kernel;
    let plane = out_shape.plane();
    let mut out = vec![0f32; out_shape.numel()];

    let run = |(o, dst): (usize, &mut [f32])| {
        dst.fill(spec.bias[o]);
        let w = &spec.weights[o * per_out..(o + 1) * per_out];
        accumulate_channel(dst, w, &padded, g, ph, pw, out_shape);
        for v in dst.iter_mut() {
            *v = spec.activation.apply(*v);
        }
    };
    match exec {
        Exec::Sequential => out.chunks_mut(plane).enumerate().for_each(run),
        Exec::Parallel => out.par_chunks_mut(plane).enumerate().for_each(run),
    }
    Ok(FloatTensor::from_raw(out_shape, out))
}

pub fn conv2d_q(input: &QuantizedTensor, spec: &QConvSpec) -> Result<QuantizedTensor> {
    conv2d_q_exec(input, spec, Exec::Sequential)
}

pub fn conv2d_q_exec(
    input: &QuantizedTensor,
    spec: &QConvSpec,
    exec: Exec,
) -> Result<QuantizedTensor> {
    spec.validate()?;
    let g = &spec.geometry;
    g.check_input(input.shape())?;
    let in_qp = input.qparams();

    let max_bias = spec.bias.iter().map(|b| b.unsigned_abs() as u64).max().unwrap_or(0);
    let bound = (g.kernel * g.kernel * g.in_channels) as u64 * 255 * 128 + max_bias;
    if bound > i32::MAX as u64 {
        return Err(Error::AccumulatorOverflow(format!(
            "conv {}x{} with {} input channels",
            g.kernel, g.kernel, g.in_channels
        )));
    }

    let stages = spec
        .weight_scales
        .iter()
        .map(|&ws| {
            OutputStage::new(
                in_qp.scale as f64 * ws as f64,
                spec.activation,
                spec.output,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let zp = in_qp.zero_point;
    let (padded, ph, pw) =
        pad_plane(input.data(), input.shape(), g.padding(), 0i16, |q| {
            (q as i32 - zp) as i16
        });
    let out_shape = g.output_shape(input.shape());
    let per_out = g.in_channels * g.kernel * g.kernel;
    let plane = out_shape.plane();
    let mut out = vec![0i8; out_shape.numel()];

    let run = |(o, dst): (usize, &mut [i8])| {
        let mut acc = vec![spec.bias[o]; plane];
        let w = &spec.weights[o * per_out..(o + 1) * per_out];
        accumulate_channel::<i8, i16, i32>(&mut acc, w, &padded, g, ph, pw, out_shape);
        let stage = &stages[o];
        for (d, &a) in dst.iter_mut().zip(&acc) {
            *d = stage.apply(a);
        }
    };
    match exec {
        Exec::Sequential => out.chunks_mut(plane).enumerate().for_each(run),
        Exec::Parallel => out.par_chunks_mut(plane).enumerate().for_each(run),
    }
    Ok(QuantizedTensor::from_raw(out_shape, out, spec.output))
}

fn maxpool_generic<T: Copy + PartialOrd>(data: &[T], shape: TensorShape) -> Result<(Vec<T>, TensorShape)> {
    if shape.height % 2 != 0 || shape.width % 2 != 0 {
        return Err(Error::SpatialMismatch {
            op: "maxpool2x2",
            detail: format!("odd spatial size {}x{}", shape.height, shape.width),
        });
    }
    let out_shape = TensorShape {
        channels: shape.channels,
        height: shape.height / 2,
        width: shape.width / 2,
    };
    let mut out = Vec::with_capacity(out_shape.numel());
    for c in 0..shape.channels {
        let plane = &data[c * shape.plane()..(c + 1) * shape.plane()];
        for y in 0..out_shape.height {
            let r0 = &plane[2 * y * shape.width..];
            let r1 = &plane[(2 * y + 1) * shape.width..];
            for x in 0..out_shape.width {
                let mut m = r0[2 * x];
                for v in [r0[2 * x + 1], r1[2 * x], r1[2 * x + 1]] {
                    if v > m {
                        m = v;
                    }
                }
                out.push(m);
            }
        }
    }
    Ok((out, out_shape))
}

pub fn maxpool2x2(input: &FloatTensor) -> Result<FloatTensor> {
    let (data, shape) = maxpool_generic(input.data(), input.shape())?;
    Ok(FloatTensor::from_raw(shape, data))
}

/// Max commutes with the monotone quantization map, so qparams carry through.
pub fn maxpool2x2_q(input: &QuantizedTensor) -> Result<QuantizedTensor> {
    let (data, shape) = maxpool_generic(input.data(), input.shape())?;
    Ok(QuantizedTensor::from_raw(shape, data, input.qparams()))
}

fn upsample_generic<T: Copy>(data: &[T], shape: TensorShape) -> (Vec<T>, TensorShape) {
    let out_shape = TensorShape {
        channels: shape.channels,
        height: shape.height * 2,
        width: shape.width * 2,
    };
    let mut out = Vec::with_capacity(out_shape.numel());
    for c in 0..shape.channels {
        for y in 0..out_shape.height {
            let row = &data[(c * shape.height + y / 2) * shape.width..][..shape.width];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    (out, out_shape)
}

pub fn upsample_nearest2x(input: &FloatTensor) -> FloatTensor {
    let (data, shape) = upsample_generic(input.data(), input.shape());
    FloatTensor::from_raw(shape, data)
}

pub fn upsample_nearest2x_q(input: &QuantizedTensor) -> QuantizedTensor {
    let (data, shape) = upsample_generic(input.data(), input.shape());
    QuantizedTensor::from_raw(shape, data, input.qparams())
}

fn concat_shape(shapes: &[TensorShape]) -> Result<TensorShape> {
    let first = *shapes.first().ok_or_else(|| Error::SpatialMismatch {
        op: "route",
        detail: "no inputs".into(),
    })?;
    let mut channels = 0;
    for s in shapes {
        if s.height != first.height || s.width != first.width {
            return Err(Error::SpatialMismatch {
                op: "route",
                detail: format!("{s} does not match {first}"),
            });
        }
        channels += s.channels;
    }
    Ok(first.with_channels(channels))
}

pub fn route_concat(inputs: &[&FloatTensor]) -> Result<FloatTensor> {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape()).collect();
    let shape = concat_shape(&shapes)?;
    let mut data = Vec::with_capacity(shape.numel());
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Ok(FloatTensor::from_raw(shape, data))
}

/// Concatenates int8 tensors, rescaling each input into `output` qparams.
pub fn route_concat_q(inputs: &[&QuantizedTensor], output: QuantParams) -> Result<QuantizedTensor> {
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape()).collect();
    let shape = concat_shape(&shapes)?;
    let mut data = Vec::with_capacity(shape.numel());
    for t in inputs {
        let qp = t.qparams();
        if qp == output {
            data.extend_from_slice(t.data());
        } else {
            let rq = Requantizer::new(qp.scale as f64 / output.scale as f64)?;
            data.extend(
                t.data()
                    .iter()
                    .map(|&q| requantize(q as i32 - qp.zero_point, &rq, output.zero_point)),
            );
        }
    }
    Ok(QuantizedTensor::from_raw(shape, data, output))
}

pub fn leaky_relu(input: &FloatTensor, slope: f32) -> FloatTensor {
    let act = Activation::LeakyRelu(slope);
    let data = input.data().iter().map(|&x| act.apply(x)).collect();
    FloatTensor::from_raw(input.shape(), data)
}

pub fn leaky_relu_q(input: &QuantizedTensor, slope: f32, output: QuantParams) -> Result<QuantizedTensor> {
    let qp = input.qparams();
    let stage = OutputStage::new(qp.scale as f64, Activation::LeakyRelu(slope), output)?;
    let data = input
        .data()
        .iter()
        .map(|&q| stage.apply(q as i32 - qp.zero_point))
        .collect();
    Ok(QuantizedTensor::from_raw(input.shape(), data, output))
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeSpec {
    pub channels: usize,
    pub hidden: usize,
    /// `(hidden, channels)` row-major.
    pub fc1_weight: Vec<f32>,
    pub fc1_bias: Vec<f32>,
    /// `(channels, hidden)` row-major.
    pub fc2_weight: Vec<f32>,
    pub fc2_bias: Vec<f32>,
}

pub fn se_hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Parameters of an SE block: both FC layers with biases.
pub fn se_param_count(channels: usize, hidden: usize) -> usize {
    2 * channels * hidden + hidden + channels
}

impl SeSpec {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = se_hidden_width(channels, reduction);
        Self {
            channels,
            hidden,
            fc1_weight: vec![0.0; hidden * channels],
            fc1_bias: vec![0.0; hidden],
            fc2_weight: vec![0.0; channels * hidden],
            fc2_bias: vec![0.0; channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels, self.hidden);
        if self.fc1_weight.len() != h * c
            || self.fc1_bias.len() != h
            || self.fc2_weight.len() != c * h
            || self.fc2_bias.len() != c
        {
            return Err(Error::InvalidShape(format!("SE block {c}->{h}->{c}")));
        }
        Ok(())
    }
}

/// Intermediate values of an SE block, reported to calibration probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SeStage {
    /// Per-channel global averages.
    Pool,
    /// First FC output before ReLU.
    Hidden,
    /// Second FC output before the sigmoid.
    Logit,
}

fn fc(weight: &[f32], bias: &[f32], x: &[f32]) -> Vec<f32> {
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * x.len()..(o + 1) * x.len()];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
        })
        .collect()
}

pub fn se_block(input: &FloatTensor, spec: &SeSpec) -> Result<FloatTensor> {
    se_block_observed(input, spec, &mut |_, _| {})
}

pub fn se_block_observed(
    input: &FloatTensor,
    spec: &SeSpec,
    probe: &mut dyn FnMut(SeStage, &[f32]),
) -> Result<FloatTensor> {
    spec.validate()?;
    let shape = input.shape();
    if shape.channels != spec.channels {
        return Err(Error::ChannelMismatch {
            op: "se_block",
            expected: spec.channels,
            actual: shape.channels,
        });
    }
    let n = shape.plane() as f32;
    let pooled: Vec<f32> = (0..shape.channels)
        .map(|c| input.channel(c).iter().sum::<f32>() / n)
        .collect();
    probe(SeStage::Pool, &pooled);
    let hidden = fc(&spec.fc1_weight, &spec.fc1_bias, &pooled);
    probe(SeStage::Hidden, &hidden);
    let hidden: Vec<f32> = hidden.into_iter().map(|v| v.max(0.0)).collect();
    let logits = fc(&spec.fc2_weight, &spec.fc2_bias, &hidden);
    probe(SeStage::Logit, &logits);

    let mut data = Vec::with_capacity(shape.numel());
    for (c, &l) in logits.iter().enumerate() {
        let g = sigmoid(l);
        data.extend(input.channel(c).iter().map(|&x| g * x));
    }
    Ok(FloatTensor::from_raw(shape, data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QSeSpec {
    pub channels: usize,
    pub hidden: usize,
    pub fc1_weight: Vec<i8>,
    pub fc1_scales: Vec<f32>,
    /// Units of `pool.scale * fc1_scales[h]`.
    pub fc1_bias: Vec<i32>,
    pub fc2_weight: Vec<i8>,
    pub fc2_scales: Vec<f32>,
    /// Units of `hidden_q.scale * fc2_scales[c]`.
    pub fc2_bias: Vec<i32>,
    pub pool: QuantParams,
    pub hidden_q: QuantParams,
    pub logit: QuantParams,
    pub output: QuantParams,
}

impl QSeSpec {
    pub fn validate(&self) -> Result<()> {
        let (c, h) = (self.channels, self.hidden);
        if self.fc1_weight.len() != h * c
            || self.fc1_scales.len() != h
            || self.fc1_bias.len() != h
            || self.fc2_weight.len() != c * h
            || self.fc2_scales.len() != c
            || self.fc2_bias.len() != c
        {
            return Err(Error::InvalidShape(format!("int8 SE block {c}->{h}->{c}")));
        }
        Ok(())
    }

    /// Sigmoid gate in Q15 for every int8 logit value.
    pub fn gate_table(&self) -> [i32; 256] {
        let mut table = [0i32; 256];
        for (i, g) in table.iter_mut().enumerate() {
            let q = i as i32 - 128;
            let x = self.logit.scale as f64 * (q - self.logit.zero_point) as f64;
            let s = 1.0 / (1.0 + (-x).exp());
            *g = (s * GATE_ONE as f64).round() as i32;
        }
        table
    }
}

pub fn se_block_q(input: &QuantizedTensor, spec: &QSeSpec) -> Result<QuantizedTensor> {
    spec.validate()?;
    let shape = input.shape();
    if shape.channels != spec.channels {
        return Err(Error::ChannelMismatch {
            op: "se_block",
            expected: spec.channels,
            actual: shape.channels,
        });
    }
    let in_qp = input.qparams();
    let zp = in_qp.zero_point;

    let pool_rq = Requantizer::new(
        in_qp.scale as f64 / (shape.plane() as f64 * spec.pool.scale as f64),
    )?;
    let pooled: Vec<i32> = (0..shape.channels)
        .map(|c| {
            let sum: i32 = input.channel(c).iter().map(|&q| q as i32 - zp).sum();
            requantize(sum, &pool_rq, spec.pool.zero_point) as i32 - spec.pool.zero_point
        })
        .collect();

    let mut hidden = Vec::with_capacity(spec.hidden);
    for h in 0..spec.hidden {
        let row = &spec.fc1_weight[h * spec.channels..(h + 1) * spec.channels];
        let acc = spec.fc1_bias[h]
            + row.iter().zip(&pooled).map(|(&w, &p)| w as i32 * p).sum::<i32>();
        let rq = Requantizer::new(
            spec.pool.scale as f64 * spec.fc1_scales[h] as f64 / spec.hidden_q.scale as f64,
        )?;
        let q = requantize(acc, &rq, spec.hidden_q.zero_point).max(spec.hidden_q.zero_point as i8);
        hidden.push(q as i32 - spec.hidden_q.zero_point);
    }

    let table = spec.gate_table();
    let out_rq = Requantizer::new(
        in_qp.scale as f64 / (GATE_ONE as f64 * spec.output.scale as f64),
    )?;
    let mut data = Vec::with_capacity(shape.numel());
    for c in 0..spec.channels {
        let row = &spec.fc2_weight[c * spec.hidden..(c + 1) * spec.hidden];
        let acc = spec.fc2_bias[c]
            + row.iter().zip(&hidden).map(|(&w, &v)| w as i32 * v).sum::<i32>();
        let rq = Requantizer::new(
            spec.hidden_q.scale as f64 * spec.fc2_scales[c] as f64 / spec.logit.scale as f64,
        )?;
        let logit = requantize(acc, &rq, spec.logit.zero_point);
        let gate = table[(logit as i32 + 128) as usize];
        data.extend(
            input
                .channel(c)
                .iter()
                .map(|&q| requantize((q as i32 - zp) * gate, &out_rq, spec.output.zero_point)),
        );
    }
    Ok(QuantizedTensor::from_raw(shape, data, spec.output))
}

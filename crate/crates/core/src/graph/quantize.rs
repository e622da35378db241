//! Post-training conversion of a float model into its int8 twin.

use super::exec::{ActivationRanges, FloatModel, FloatNodeParams, ProbePoint, QuantModel, QuantNodeParams};
use super::LayerKind;
use serde::Serialize;

use crate::kernels::{ConvSpec, Exec, QConvSpec, QSeSpec, SeSpec, SeStage};
use crate::qtensor::{compute_qparams, dequantize, FloatTensor, QuantMode, QuantParams};
use crate::{Error, Result};

/// Symmetric per-row quantization of a row-major weight matrix. All-zero
/// rows get scale 1.
pub fn weight_qparams(weights: &[f32], rows: usize) -> (Vec<i8>, Vec<f32>) {
    let cols = weights.len() / rows.max(1);
    let mut q = Vec::with_capacity(weights.len());
    let mut scales = Vec::with_capacity(rows);
    for row in weights.chunks(cols.max(1)).take(rows) {
        let m = row.iter().fold(0f32, |a, v| a.max(v.abs()));
        let qp = compute_qparams(-m, m, QuantMode::Symmetric)
            .unwrap_or(QuantParams { scale: 1.0, zero_point: 0 });
        q.extend(row.iter().map(|&v| qp.quantize_value(v)));
        scales.push(qp.scale);
    }
    (q, scales)
}

fn quantize_bias(bias: &[f32], input_scale: f32, weight_scales: &[f32]) -> Vec<i32> {
    bias.iter()
        .zip(weight_scales)
        .map(|(&b, &ws)| {
            let v = (b as f64 / (input_scale as f64 * ws as f64)).round();
            v.clamp(i32::MIN as f64, i32::MAX as f64) as i32
        })
        .collect()
}

fn quantize_conv(spec: &ConvSpec, input: QuantParams, output: QuantParams) -> QConvSpec {
    let (weights, weight_scales) = weight_qparams(&spec.weights, spec.geometry.out_channels);
    QConvSpec {
        geometry: spec.geometry,
        bias: quantize_bias(&spec.bias, input.scale, &weight_scales),
        weights,
        weight_scales,
        activation: spec.activation,
        output,
    }
}

fn quantize_se(spec: &SeSpec, qps: [QuantParams; 4]) -> QSeSpec {
    let [pool, hidden_q, logit, output] = qps;
    let (fc1_weight, fc1_scales) = weight_qparams(&spec.fc1_weight, spec.hidden);
    let (fc2_weight, fc2_scales) = weight_qparams(&spec.fc2_weight, spec.channels);
    QSeSpec {
        channels: spec.channels,
        hidden: spec.hidden,
        fc1_bias: quantize_bias(&spec.fc1_bias, pool.scale, &fc1_scales),
        fc1_weight,
        fc1_scales,
        fc2_bias: quantize_bias(&spec.fc2_bias, hidden_q.scale, &fc2_scales),
        fc2_weight,
        fc2_scales,
        pool,
        hidden_q,
        logit,
        output,
    }
}

/// Builds the int8 model: asymmetric per-tensor activations from `ranges`,
/// symmetric per-output-channel weights, `i32` biases.
pub fn quantize_model(model: &FloatModel, ranges: &ActivationRanges) -> Result<QuantModel> {
    let graph = model.graph();
    let qp = |point: ProbePoint, name: String| -> Result<QuantParams> {
        let (lo, hi) = ranges
            .get(point)
            .ok_or_else(|| Error::InvalidQuantParams(format!("{name} was never observed")))?;
        compute_qparams(lo, hi, QuantMode::Asymmetric).map_err(|e| match e {
            Error::DegenerateRange(_) => Error::DegenerateRange(name),
            other => other,
        })
    };

    let input = qp(ProbePoint::Input, "input".into())?;
    let mut out_qp: Vec<Option<QuantParams>> = Vec::with_capacity(graph.len());
    let mut params = Vec::with_capacity(graph.len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let label = graph.label(i);
        let in_qp = |src: Option<usize>| -> QuantParams {
            match src {
                None => input,
                Some(s) => out_qp[s].expect("detect output is never read"),
            }
        };
        let prev = in_qp(i.checked_sub(1));
        let (p, o) = match (&node.kind, &model.params()[i]) {
            (LayerKind::Conv { .. }, FloatNodeParams::Conv(spec)) => {
                let o = qp(ProbePoint::Output(i), format!("{label} output"))?;
                (QuantNodeParams::Conv(quantize_conv(spec, prev, o)), Some(o))
            }
            (LayerKind::Se, FloatNodeParams::Se(spec)) => {
                let stage = |s: SeStage, n: &str| qp(ProbePoint::Se(i, s), format!("{label} SE {n}"));
                let qps = [
                    stage(SeStage::Pool, "pool")?,
                    stage(SeStage::Hidden, "hidden")?,
                    stage(SeStage::Logit, "logit")?,
                    qp(ProbePoint::Output(i), format!("{label} output"))?,
                ];
                (QuantNodeParams::Se(quantize_se(spec, qps)), Some(qps[3]))
            }
            (LayerKind::Route(refs), _) => {
                let o = if refs.len() == 1 {
                    in_qp(Some(refs[0]))
                } else {
                    qp(ProbePoint::Output(i), format!("{label} output"))?
                };
                (QuantNodeParams::Route(o), Some(o))
            }
            (LayerKind::MaxPool | LayerKind::Upsample, _) => (QuantNodeParams::None, Some(prev)),
            (LayerKind::Detect(refs), FloatNodeParams::Detect(stems)) => {
                let heads = stems
                    .iter()
                    .zip(refs)
                    .enumerate()
                    .map(|(k, (stem, &r))| {
                        let o = qp(ProbePoint::Head(k), format!("{label} head{k}"))?;
                        Ok(quantize_conv(stem, in_qp(Some(r)), o))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (QuantNodeParams::Detect(heads), None)
            }
            _ => {
                return Err(Error::InvalidShape(format!("{label}: parameters do not match the layer")))
            }
        };
        params.push(p);
        out_qp.push(o);
    }
    QuantModel::new(graph.clone(), input, params)
}

/// Mean absolute error of one int8 node output against its float twin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerError {
    pub label: String,
    pub mae: f32,
    /// Quantization step of the int8 output.
    pub scale: f32,
}

impl LayerError {
    pub fn in_steps(&self) -> f32 {
        self.mae / self.scale
    }
}

/// Runs both models on `image` and compares every node output and every head
/// in real units. The int8 model sees its own upstream results, so errors
/// accumulate as they would in deployment.
pub fn layer_errors(float: &FloatModel, quant: &QuantModel, image: &FloatTensor) -> Result<Vec<LayerError>> {
    let graph = float.graph();
    let mut reference: Vec<Option<Vec<f32>>> = vec![None; graph.len()];
    let heads = float.execute_with(image, Exec::Sequential, &mut |p, v| {
        if let ProbePoint::Output(i) = p {
            reference[i] = Some(v.to_vec());
        }
    })?;
    let mae = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f32>() / a.len().max(1) as f32;
    let mut out = Vec::new();
    let qheads = quant.execute_observed(&quant.quantize_input(image), Exec::Sequential, &mut |i, t| {
        if let Some(f) = &reference[i] {
            out.push(LayerError {
                label: graph.label(i),
                mae: mae(dequantize(t).data(), f),
                scale: t.qparams().scale,
            });
        }
    })?;
    let detect = graph.detect_node().map_or_else(|| "detect".to_string(), |(i, _)| graph.label(i));
    for (k, (q, f)) in qheads.iter().zip(&heads).enumerate() {
        out.push(LayerError {
            label: format!("{detect}.head{k}"),
            mae: mae(dequantize(q).data(), f.data()),
            scale: q.qparams().scale,
        });
    }
    Ok(out)
}

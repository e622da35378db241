use std::collections::BTreeMap;

use serde::Serialize;

use super::{LayerKind, NetworkGraph};
use crate::kernels::{
    self, Activation, ConvSpec, Exec, QConvSpec, QSeSpec, SeSpec, SeStage,
};
use crate::qtensor::{dequantize, quantize, FloatTensor, QuantParams, QuantizedTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Float,
    Int8,
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelMode::Float => "float",
            ModelMode::Int8 => "int8",
        })
    }
}

/// A tensor observed during a float forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProbePoint {
    Input,
    Output(usize),
    Se(usize, SeStage),
    Head(usize),
}

/// Running `(min, max)` per probe point, collected over calibration images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationRanges {
    ranges: BTreeMap<ProbePoint, (f32, f32)>,
}

impl ActivationRanges {
    pub fn observe(&mut self, point: ProbePoint, values: &[f32]) {
        let entry = self
            .ranges
            .entry(point)
            .or_insert((f32::INFINITY, f32::NEG_INFINITY));
        for &v in values {
            entry.0 = entry.0.min(v);
            entry.1 = entry.1.max(v);
        }
    }

    pub fn get(&self, point: ProbePoint) -> Option<(f32, f32)> {
        self.ranges.get(&point).copied()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

enum NodeOut<T> {
    Tensor(T),
    Heads(Vec<T>),
}

/// Walks the graph in order, dropping each activation right after its last
/// consumer has read it.
fn run_graph<T>(
    graph: &NetworkGraph,
    input: T,
    mut eval: impl FnMut(usize, &[&T]) -> Result<NodeOut<T>>,
) -> Result<Vec<T>> {
    let n = graph.len();
    let last = graph.last_consumers();
    let mut slots: Vec<Option<T>> = (0..=n).map(|_| None).collect();
    slots[0] = Some(input);
    if n == 0 {
        return Ok(slots.into_iter().flatten().collect());
    }
    for i in 0..n {
        let out = {
            let sources = graph.inputs_of(i);
            let mut refs = Vec::with_capacity(sources.len());
            for src in &sources {
                let slot = src.map_or(0, |s| s + 1);
                let t = slots[slot].as_ref().ok_or_else(|| Error::ShapeContradiction {
                    node: graph.label(i),
                    detail: format!("activation slot {slot} was released before this read"),
                })?;
                refs.push(t);
            }
            eval(i, &refs)?
        };
        for (slot, consumer) in last.iter().enumerate() {
            if *consumer == Some(i) {
                slots[slot] = None;
            }
        }
        match out {
            NodeOut::Heads(heads) => return Ok(heads),
            NodeOut::Tensor(t) => {
                if last[i + 1].is_some() || i + 1 == n {
                    slots[i + 1] = Some(t);
                }
            }
        }
    }
    Ok(slots.pop().flatten().into_iter().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FloatNodeParams {
    None,
    Conv(ConvSpec),
    Se(SeSpec),
    Detect(Vec<ConvSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    graph: NetworkGraph,
    params: Vec<FloatNodeParams>,
}

fn param_mismatch(graph: &NetworkGraph, i: usize, what: &str) -> Error {
    Error::InvalidShape(format!("{}: {what}", graph.label(i)))
}

impl FloatModel {
    pub fn new(graph: NetworkGraph, params: Vec<FloatNodeParams>) -> Result<Self> {
        let shapes = graph.infer_shapes()?;
        if params.len() != graph.len() {
            return Err(Error::InvalidShape(format!(
                "{} parameter records for {} nodes",
                params.len(),
                graph.len()
            )));
        }
        let heads = graph.head_geometries(&shapes);
        for (i, p) in params.iter().enumerate() {
            let ok = match (&graph.nodes()[i].kind, p) {
                (LayerKind::Conv { .. }, FloatNodeParams::Conv(c)) => {
                    Some(c.geometry) == graph.conv_geometry(&shapes, i)
                        && c.activation == Activation::LeakyRelu(graph.config().leaky_slope)
                }
                (LayerKind::Se, FloatNodeParams::Se(s)) => {
                    let c = shapes.of(i.checked_sub(1)).channels;
                    s.channels == c && s.hidden == graph.se_hidden(c) && s.validate().is_ok()
                }
                (LayerKind::Detect(_), FloatNodeParams::Detect(stems)) => {
                    stems.len() == heads.len()
                        && stems
                            .iter()
                            .zip(&heads)
                            .all(|(s, g)| s.geometry == *g && s.activation == Activation::Linear)
                }
                (
                    LayerKind::Route(_) | LayerKind::MaxPool | LayerKind::Upsample,
                    FloatNodeParams::None,
                ) => true,
                _ => false,
            };
            if !ok {
                return Err(param_mismatch(&graph, i, "parameters do not match the layer"));
            }
        }
        Ok(Self { graph, params })
    }

    /// All weights and biases zero.
    pub fn zeros(graph: NetworkGraph) -> Result<Self> {
        let shapes = graph.infer_shapes()?;
        let slope = graph.config().leaky_slope;
        let heads = graph.head_geometries(&shapes);
        let params = (0..graph.len())
            .map(|i| match &graph.nodes()[i].kind {
                LayerKind::Conv { .. } => {
                    let g = graph.conv_geometry(&shapes, i).expect("conv");
                    FloatNodeParams::Conv(ConvSpec {
                        geometry: g,
                        weights: vec![0.0; g.weight_len()],
                        bias: vec![0.0; g.out_channels],
                        activation: Activation::LeakyRelu(slope),
                    })
                }
                LayerKind::Se => FloatNodeParams::Se(SeSpec::zeros(
                    shapes.of(i.checked_sub(1)).channels,
                    graph.config().se_reduction,
                )),
                LayerKind::Detect(_) => FloatNodeParams::Detect(
                    heads
                        .iter()
                        .map(|g| ConvSpec {
                            geometry: *g,
                            weights: vec![0.0; g.weight_len()],
                            bias: vec![0.0; g.out_channels],
                            activation: Activation::Linear,
                        })
                        .collect(),
                ),
                _ => FloatNodeParams::None,
            })
            .collect();
        Self::new(graph, params)
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn params(&self) -> &[FloatNodeParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [FloatNodeParams] {
        &mut self.params
    }

    pub fn execute(&self, image: &FloatTensor) -> Result<Vec<FloatTensor>> {
        self.execute_with(image, Exec::Sequential, &mut |_, _| {})
    }

    /// Runs the network, reporting every intermediate tensor to `probe`.
    pub fn execute_with(
        &self,
        image: &FloatTensor,
        exec: Exec,
        probe: &mut dyn FnMut(ProbePoint, &[f32]),
    ) -> Result<Vec<FloatTensor>> {
        let expected = self.graph.config().input_shape;
        if image.shape() != expected {
            return Err(Error::InvalidShape(format!(
                "image is {} but the network expects {expected}",
                image.shape()
            )));
        }
        probe(ProbePoint::Input, image.data());
        run_graph(&self.graph, image.clone(), |i, inputs| {
            let out = match (&self.graph.nodes()[i].kind, &self.params[i]) {
                (LayerKind::Conv { .. }, FloatNodeParams::Conv(spec)) => {
                    kernels::conv2d_exec(inputs[0], spec, exec)?
                }
                (LayerKind::Se, FloatNodeParams::Se(spec)) => {
                    kernels::se_block_observed(inputs[0], spec, &mut |stage, v| {
                        probe(ProbePoint::Se(i, stage), v)
                    })?
                }
                (LayerKind::Route(_), _) => kernels::route_concat(inputs)?,
                (LayerKind::MaxPool, _) => kernels::maxpool2x2(inputs[0])?,
                (LayerKind::Upsample, _) => kernels::upsample_nearest2x(inputs[0]),
                (LayerKind::Detect(_), FloatNodeParams::Detect(stems)) => {
                    let mut heads = Vec::with_capacity(stems.len());
                    for (k, (stem, x)) in stems.iter().zip(inputs).enumerate() {
                        let h = kernels::conv2d_exec(x, stem, exec)?;
                        probe(ProbePoint::Head(k), h.data());
                        heads.push(h);
                    }
                    return Ok(NodeOut::Heads(heads));
                }
                _ => return Err(param_mismatch(&self.graph, i, "missing parameters")),
            };
            probe(ProbePoint::Output(i), out.data());
            Ok(NodeOut::Tensor(out))
        })
    }

    /// Min/max of every activation over the calibration images.
    pub fn collect_ranges(&self, images: &[FloatTensor]) -> Result<ActivationRanges> {
        let mut ranges = ActivationRanges::default();
        for image in images {
            self.execute_with(image, Exec::Parallel, &mut |p, v| ranges.observe(p, v))?;
        }
        Ok(ranges)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QuantNodeParams {
    /// MaxPool and Upsample keep their input's qparams.
    None,
    Conv(QConvSpec),
    Se(QSeSpec),
    Route(QuantParams),
    Detect(Vec<QConvSpec>),
}

impl QuantNodeParams {
    /// Output qparams of this node, if it defines its own.
    pub fn output_qparams(&self) -> Option<QuantParams> {
        match self {
            QuantNodeParams::Conv(c) => Some(c.output),
            QuantNodeParams::Se(s) => Some(s.output),
            QuantNodeParams::Route(qp) => Some(*qp),
            QuantNodeParams::None | QuantNodeParams::Detect(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantModel {
    graph: NetworkGraph,
    input: QuantParams,
    params: Vec<QuantNodeParams>,
}

impl QuantModel {
    pub fn new(graph: NetworkGraph, input: QuantParams, params: Vec<QuantNodeParams>) -> Result<Self> {
        let shapes = graph.infer_shapes()?;
        if params.len() != graph.len() {
            return Err(Error::InvalidShape(format!(
                "{} parameter records for {} nodes",
                params.len(),
                graph.len()
            )));
        }
        let heads = graph.head_geometries(&shapes);
        for (i, p) in params.iter().enumerate() {
            let ok = match (&graph.nodes()[i].kind, p) {
                (LayerKind::Conv { .. }, QuantNodeParams::Conv(c)) => {
                    Some(c.geometry) == graph.conv_geometry(&shapes, i) && c.validate().is_ok()
                }
                (LayerKind::Se, QuantNodeParams::Se(s)) => {
                    let c = shapes.of(i.checked_sub(1)).channels;
                    s.channels == c && s.hidden == graph.se_hidden(c) && s.validate().is_ok()
                }
                (LayerKind::Route(_), QuantNodeParams::Route(_)) => true,
                (LayerKind::Detect(_), QuantNodeParams::Detect(stems)) => {
                    stems.len() == heads.len()
                        && stems
                            .iter()
                            .zip(&heads)
                            .all(|(s, g)| s.geometry == *g && s.validate().is_ok())
                }
                (LayerKind::MaxPool | LayerKind::Upsample, QuantNodeParams::None) => true,
                _ => false,
            };
            if !ok {
                return Err(param_mismatch(&graph, i, "int8 parameters do not match the layer"));
            }
        }
        Ok(Self {
            graph,
            input,
            params,
        })
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn input_qparams(&self) -> QuantParams {
        self.input
    }

    pub fn params(&self) -> &[QuantNodeParams] {
        &self.params
    }

    pub fn quantize_input(&self, image: &FloatTensor) -> QuantizedTensor {
        quantize(image, self.input)
    }

    pub fn execute(&self, image: &QuantizedTensor, exec: Exec) -> Result<Vec<QuantizedTensor>> {
        self.execute_observed(image, exec, &mut |_, _| {})
    }

    /// Runs the integer network; `observer` sees every node output.
    pub fn execute_observed(
        &self,
        image: &QuantizedTensor,
        exec: Exec,
        observer: &mut dyn FnMut(usize, &QuantizedTensor),
    ) -> Result<Vec<QuantizedTensor>> {
        let expected = self.graph.config().input_shape;
        if image.shape() != expected {
            return Err(Error::InvalidShape(format!(
                "image is {} but the network expects {expected}",
                image.shape()
            )));
        }
        if image.qparams() != self.input {
            return Err(Error::InvalidQuantParams(
                "image is not quantized with the model's input parameters".into(),
            ));
        }
        run_graph(&self.graph, image.clone(), |i, inputs| {
            let out = match (&self.graph.nodes()[i].kind, &self.params[i]) {
                (LayerKind::Conv { .. }, QuantNodeParams::Conv(spec)) => {
                    kernels::conv2d_q_exec(inputs[0], spec, exec)?
                }
                (LayerKind::Se, QuantNodeParams::Se(spec)) => kernels::se_block_q(inputs[0], spec)?,
                (LayerKind::Route(_), QuantNodeParams::Route(qp)) => {
                    kernels::route_concat_q(inputs, *qp)?
                }
                (LayerKind::MaxPool, _) => kernels::maxpool2x2_q(inputs[0])?,
                (LayerKind::Upsample, _) => kernels::upsample_nearest2x_q(inputs[0]),
                (LayerKind::Detect(_), QuantNodeParams::Detect(stems)) => {
                    let heads = stems
                        .iter()
                        .zip(inputs)
                        .map(|(stem, x)| kernels::conv2d_q_exec(x, stem, exec))
                        .collect::<Result<Vec<_>>>()?;
                    return Ok(NodeOut::Heads(heads));
                }
                _ => return Err(param_mismatch(&self.graph, i, "missing parameters")),
            };
            observer(i, &out);
            Ok(NodeOut::Tensor(out))
        })
    }
}

/// A loaded network in either execution mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Float(FloatModel),
    Int8(QuantModel),
}

impl Model {
    pub fn graph(&self) -> &NetworkGraph {
        match self {
            Model::Float(m) => m.graph(),
            Model::Int8(m) => m.graph(),
        }
    }

    pub fn mode(&self) -> ModelMode {
        match self {
            Model::Float(_) => ModelMode::Float,
            Model::Int8(_) => ModelMode::Int8,
        }
    }

    /// Head activations in real units (int8 heads are dequantized).
    pub fn infer(&self, image: &FloatTensor, exec: Exec) -> Result<Vec<FloatTensor>> {
        match self {
            Model::Float(m) => m.execute_with(image, exec, &mut |_, _| {}),
            Model::Int8(m) => Ok(m
                .execute(&m.quantize_input(image), exec)?
                .iter()
                .map(dequantize)
                .collect()),
        }
    }
}

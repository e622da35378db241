//! The Squeezed Edge YOLO layer graph.
//!
//! Nodes mirror the published backbone (13 rows) and neck (18 rows) tables in
//! order. Route and Detect rows reference earlier rows by table index within
//! their own section; after construction all references are flat node indices.

mod exec;
mod quantize;

use serde::Serialize;

pub use exec::{
    ActivationRanges, FloatModel, FloatNodeParams, Model, ModelMode, ProbePoint, QuantModel,
    QuantNodeParams,
};
pub use quantize::{layer_errors, quantize_model, weight_qparams, LayerError};

use crate::kernels::{
    self, se_hidden_width, se_param_count, ConvGeometry, DEFAULT_LEAKY_SLOPE, DEFAULT_SE_REDUCTION,
};
use crate::qtensor::TensorShape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Backbone,
    Neck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct NodeId {
    pub section: Section,
    pub index: usize,
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self.section {
            Section::Backbone => "backbone",
            Section::Neck => "neck",
        };
        write!(f, "{s}.{}", self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        filters: usize,
    },
    Se,
    /// Channel concatenation of the referenced nodes (flat indices).
    Route(Vec<usize>),
    MaxPool,
    Upsample,
    /// Detection heads attached to the referenced nodes.
    Detect(Vec<usize>),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "Conv",
            LayerKind::Se => "SE",
            LayerKind::Route(_) => "Route",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::Upsample => "Upsample",
            LayerKind::Detect(_) => "Detect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNode {
    pub id: NodeId,
    pub kind: LayerKind,
}

/// Which column of the neck table decides the width of rows 8-10, whose
/// `Filters` (64) and `Output` (128 channels) entries disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NeckWidthSource {
    #[default]
    FiltersColumn,
    OutputColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetConfig {
    pub input_shape: TensorShape,
    pub num_classes: usize,
    pub anchors_per_head: usize,
    /// Per head, in Detect input order: `(w, h)` in input pixels.
    pub anchors: Vec<Vec<(f32, f32)>>,
    pub se_reduction: usize,
    pub leaky_slope: f32,
    pub neck_width_source: NeckWidthSource,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_shape: TensorShape {
                channels: 3,
                height: 128,
                width: 128,
            },
            num_classes: 3,
            anchors_per_head: 3,
            anchors: vec![
                vec![(32.0, 32.0), (64.0, 48.0), (48.0, 64.0)],
                vec![(8.0, 8.0), (16.0, 12.0), (12.0, 16.0)],
            ],
            se_reduction: DEFAULT_SE_REDUCTION,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            neck_width_source: NeckWidthSource::FiltersColumn,
        }
    }
}

impl NetConfig {
    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_shape.height = size;
        self.input_shape.width = size;
        self
    }

    pub fn head_channels(&self) -> usize {
        self.anchors_per_head * (5 + self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.input_shape;
        if s.height != s.width || s.height == 0 || s.height % 16 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input must be square with side divisible by 16, got {}x{}",
                s.height, s.width
            )));
        }
        if s.channels == 0 {
            return Err(Error::InvalidConfig("input needs at least one channel".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be at least 1".into()));
        }
        if self.anchors_per_head == 0 || self.anchors.iter().any(|a| a.len() != self.anchors_per_head) {
            return Err(Error::InvalidConfig(format!(
                "each head needs exactly {} anchors",
                self.anchors_per_head
            )));
        }
        if self.se_reduction == 0 {
            return Err(Error::InvalidConfig("se_reduction must be positive".into()));
        }
        Ok(())
    }
}

/// Shapes of every node output plus the detection-stem outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeMap {
    pub input: TensorShape,
    /// `None` for the Detect node.
    pub outputs: Vec<Option<TensorShape>>,
    pub heads: Vec<TensorShape>,
}

impl ShapeMap {
    /// Output of node `i`, or the network input for `None`.
    pub fn of(&self, i: Option<usize>) -> TensorShape {
        match i {
            None => self.input,
            Some(i) => self.outputs[i].expect("detect node has no output tensor"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    nodes: Vec<LayerNode>,
    config: NetConfig,
}

/// Output column of the backbone and neck tables as `(H, W, C)`; `None` for Detect.
pub const PUBLISHED_OUTPUTS: [(Section, usize, Option<(usize, usize, usize)>); 31] = {
    use Section::*;
    [
        (Backbone, 0, Some((64, 64, 16))),
        (Backbone, 1, Some((32, 32, 32))),
        (Backbone, 2, Some((32, 32, 32))),
        (Backbone, 3, Some((32, 32, 16))),
        (Backbone, 4, Some((32, 32, 16))),
        (Backbone, 5, Some((32, 32, 16))),
        (Backbone, 6, Some((32, 32, 16))),
        (Backbone, 7, Some((32, 32, 32))),
        (Backbone, 8, Some((32, 32, 32))),
        (Backbone, 9, Some((32, 32, 32))),
        (Backbone, 10, Some((32, 32, 64))),
        (Backbone, 11, Some((32, 32, 64))),
        (Backbone, 12, Some((16, 16, 64))),
        (Neck, 0, Some((16, 16, 64))),
        (Neck, 1, Some((8, 8, 128))),
        (Neck, 2, Some((8, 8, 128))),
        (Neck, 3, Some((8, 8, 256))),
        (Neck, 4, Some((8, 8, 256))),
        (Neck, 5, Some((8, 8, 256))),
        (Neck, 6, Some((8, 8, 128))),
        (Neck, 7, Some((8, 8, 256))),
        (Neck, 8, Some((8, 8, 128))),
        (Neck, 9, Some((16, 16, 128))),
        (Neck, 10, Some((16, 16, 64))),
        (Neck, 11, Some((16, 16, 128))),
        (Neck, 12, Some((16, 16, 128))),
        (Neck, 13, Some((16, 16, 128))),
        (Neck, 14, Some((16, 16, 128))),
        (Neck, 15, Some((16, 16, 128))),
        (Neck, 16, Some((16, 16, 64))),
        (Neck, 17, None),
    ]
};

/// Published outputs adjusted for the neck width resolution: reading the
/// `Filters` column makes neck rows 8 and 9 carry 64 channels.
pub fn expected_outputs(source: NeckWidthSource) -> Vec<Option<TensorShape>> {
    PUBLISHED_OUTPUTS
        .iter()
        .map(|&(section, index, out)| {
            out.map(|(h, w, c)| {
                let c = match (source, section, index) {
                    (NeckWidthSource::FiltersColumn, Section::Neck, 8 | 9) => 64,
                    _ => c,
                };
                TensorShape {
                    channels: c,
                    height: h,
                    width: w,
                }
            })
        })
        .collect()
}

const BACKBONE_ROWS: usize = 13;

enum Row {
    Conv(usize, usize, usize),
    Se,
    Route(&'static [usize]),
    MaxPool,
    Upsample,
    Detect(&'static [usize]),
}

/// Builds the two-head network from the backbone and neck tables.
pub fn build_squeezed_edge_yolo(config: NetConfig) -> Result<NetworkGraph> {
    use Row::*;
    config.validate()?;
    let backbone = [
        Conv(3, 2, 16),
        Conv(3, 2, 32),
        Se,
        Conv(3, 1, 16),
        Se,
        Conv(3, 1, 16),
        Se,
        Route(&[6, 4]),
        Conv(3, 1, 32),
        Se,
        Route(&[2, 9]),
        Se,
        MaxPool,
    ];
    let row8 = match config.neck_width_source {
        NeckWidthSource::FiltersColumn => 64,
        NeckWidthSource::OutputColumn => 128,
    };
    let neck = [
        Conv(3, 1, 64),
        Conv(3, 2, 128),
        Se,
        Conv(1, 1, 256),
        Se,
        Conv(1, 1, 256),
        Conv(3, 1, 128),
        Route(&[5]),
        Conv(3, 1, row8),
        Upsample,
        Conv(1, 1, 64),
        Route(&[10, 0]),
        Conv(3, 1, 128),
        Se,
        Conv(1, 1, 128),
        Se,
        Conv(3, 1, 64),
        Detect(&[6, 16]),
    ];
    let sections = [(Section::Backbone, &backbone[..], 0), (Section::Neck, &neck[..], BACKBONE_ROWS)];
    let mut nodes = Vec::with_capacity(backbone.len() + neck.len());
    for (section, rows, base) in sections {
        for (index, row) in rows.iter().enumerate() {
            let refs = |r: &[usize]| r.iter().map(|&i| base + i).collect::<Vec<_>>();
            let kind = match row {
                Conv(k, s, f) => LayerKind::Conv {
                    kernel: *k,
                    stride: *s,
                    filters: *f,
                },
                Se => LayerKind::Se,
                Route(r) => LayerKind::Route(refs(r)),
                MaxPool => LayerKind::MaxPool,
                Upsample => LayerKind::Upsample,
                Detect(r) => LayerKind::Detect(refs(r)),
            };
            nodes.push(LayerNode {
                id: NodeId { section, index },
                kind,
            });
        }
    }
    NetworkGraph::new(config, nodes)
}

impl NetworkGraph {
    /// Validates references and Detect placement. Graphs without a Detect
    /// node treat their final node output as the single head.
    pub fn new(config: NetConfig, nodes: Vec<LayerNode>) -> Result<Self> {
        config.validate()?;
        for (i, node) in nodes.iter().enumerate() {
            match &node.kind {
                LayerKind::Route(refs) | LayerKind::Detect(refs) => {
                    if refs.is_empty() {
                        return Err(Error::ShapeContradiction {
                            node: node.id.to_string(),
                            detail: "no inputs".into(),
                        });
                    }
                    if let Some(&bad) = refs.iter().find(|&&r| r >= i) {
                        return Err(Error::ShapeContradiction {
                            node: node.id.to_string(),
                            detail: format!("reference {bad} is not an earlier node"),
                        });
                    }
                }
                _ => {}
            }
            if matches!(node.kind, LayerKind::Detect(_)) && i + 1 != nodes.len() {
                return Err(Error::ShapeContradiction {
                    node: node.id.to_string(),
                    detail: "Detect must be the final node".into(),
                });
            }
        }
        for node in &nodes {
            if let LayerKind::Detect(refs) = &node.kind {
                if refs.len() != config.anchors.len() {
                    return Err(Error::InvalidConfig(format!(
                        "{} detection inputs but {} anchor sets",
                        refs.len(),
                        config.anchors.len()
                    )));
                }
            }
        }
        Ok(Self { nodes, config })
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn label(&self, i: usize) -> String {
        self.nodes[i].id.to_string()
    }

    /// Flat indices of the tensors node `i` reads; `None` is the network input.
    pub fn inputs_of(&self, i: usize) -> Vec<Option<usize>> {
        match &self.nodes[i].kind {
            LayerKind::Route(refs) | LayerKind::Detect(refs) => refs.iter().map(|&r| Some(r)).collect(),
            _ => vec![i.checked_sub(1)],
        }
    }

    /// Index of the last node that reads each tensor; slot 0 is the network input.
    pub fn last_consumers(&self) -> Vec<Option<usize>> {
        let mut last = vec![None; self.nodes.len() + 1];
        for i in 0..self.nodes.len() {
            for src in self.inputs_of(i) {
                let slot = src.map_or(0, |s| s + 1);
                last[slot] = Some(i);
            }
        }
        last
    }

    pub fn detect_node(&self) -> Option<(usize, &[usize])> {
        self.nodes.iter().enumerate().find_map(|(i, n)| match &n.kind {
            LayerKind::Detect(refs) => Some((i, refs.as_slice())),
            _ => None,
        })
    }

    pub fn infer_shapes(&self) -> Result<ShapeMap> {
        let input = self.config.input_shape;
        let mut outputs: Vec<Option<TensorShape>> = Vec::with_capacity(self.nodes.len());
        let mut heads = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let contradiction = |detail: String| Error::ShapeContradiction {
                node: node.id.to_string(),
                detail,
            };
            let prev = || -> Result<TensorShape> {
                match i.checked_sub(1) {
                    None => Ok(input),
                    Some(p) => outputs[p].ok_or_else(|| contradiction("reads a Detect node".into())),
                }
            };
            let out = match &node.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    filters,
                } => {
                    if *filters == 0 || *kernel == 0 || *stride == 0 {
                        return Err(contradiction("zero-sized convolution".into()));
                    }
                    let inp = prev()?;
                    Some(
                        ConvGeometry {
                            kernel: *kernel,
                            stride: *stride,
                            in_channels: inp.channels,
                            out_channels: *filters,
                        }
                        .output_shape(inp),
                    )
                }
                LayerKind::Se => Some(prev()?),
                LayerKind::MaxPool => {
                    let inp = prev()?;
                    if inp.height % 2 != 0 || inp.width % 2 != 0 {
                        return Err(contradiction(format!("max pool over odd extent {inp}")));
                    }
                    Some(TensorShape {
                        height: inp.height / 2,
                        width: inp.width / 2,
                        ..inp
                    })
                }
                LayerKind::Upsample => {
                    let inp = prev()?;
                    Some(TensorShape {
                        height: inp.height * 2,
                        width: inp.width * 2,
                        ..inp
                    })
                }
                LayerKind::Route(refs) => {
                    let shapes: Vec<TensorShape> = refs
                        .iter()
                        .map(|&r| outputs[r].ok_or_else(|| contradiction("routes a Detect node".into())))
                        .collect::<Result<_>>()?;
                    let first = shapes[0];
                    if let Some(s) = shapes.iter().find(|s| s.height != first.height || s.width != first.width) {
                        return Err(contradiction(format!("route inputs {first} and {s} differ spatially")));
                    }
                    Some(first.with_channels(shapes.iter().map(|s| s.channels).sum()))
                }
                LayerKind::Detect(refs) => {
                    for &r in refs {
                        let s = outputs[r].ok_or_else(|| contradiction("detects on a Detect node".into()))?;
                        heads.push(s.with_channels(self.config.head_channels()));
                    }
                    None
                }
            };
            outputs.push(out);
        }
        if heads.is_empty() {
            if let Some(Some(last)) = outputs.last() {
                heads.push(*last);
            }
        }
        Ok(ShapeMap {
            input,
            outputs,
            heads,
        })
    }

    /// Conv geometry of node `i`, if it is a convolution.
    pub fn conv_geometry(&self, shapes: &ShapeMap, i: usize) -> Option<ConvGeometry> {
        match self.nodes[i].kind {
            LayerKind::Conv {
                kernel,
                stride,
                filters,
            } => Some(ConvGeometry {
                kernel,
                stride,
                in_channels: shapes.of(i.checked_sub(1)).channels,
                out_channels: filters,
            }),
            _ => None,
        }
    }

    /// 1x1 detection stems, in Detect input order.
    pub fn head_geometries(&self, shapes: &ShapeMap) -> Vec<ConvGeometry> {
        match self.detect_node() {
            None => Vec::new(),
            Some((_, refs)) => refs
                .iter()
                .map(|&r| ConvGeometry {
                    kernel: 1,
                    stride: 1,
                    in_channels: shapes.of(Some(r)).channels,
                    out_channels: self.config.head_channels(),
                })
                .collect(),
        }
    }

    /// Grid side length of each head.
    pub fn head_grids(&self, shapes: &ShapeMap) -> Vec<usize> {
        shapes.heads.iter().map(|s| s.height).collect()
    }

    pub fn se_hidden(&self, channels: usize) -> usize {
        se_hidden_width(channels, self.config.se_reduction)
    }

    /// Trainable parameters per node (weights and biases).
    pub fn layer_params(&self, shapes: &ShapeMap) -> Vec<usize> {
        (0..self.nodes.len())
            .map(|i| match &self.nodes[i].kind {
                LayerKind::Conv { .. } => {
                    kernels::param_count(&self.conv_geometry(shapes, i).expect("conv"))
                }
                LayerKind::Se => {
                    let c = shapes.of(i.checked_sub(1)).channels;
                    se_param_count(c, self.se_hidden(c))
                }
                LayerKind::Detect(_) => self
                    .head_geometries(shapes)
                    .iter()
                    .map(kernels::param_count)
                    .sum(),
                _ => 0,
            })
            .collect()
    }

    pub fn param_count(&self) -> Result<usize> {
        let shapes = self.infer_shapes()?;
        Ok(self.layer_params(&shapes).iter().sum())
    }

    /// Operations per node; one multiply or one add counts as one op.
    pub fn layer_ops(&self, shapes: &ShapeMap) -> Vec<u64> {
        (0..self.nodes.len())
            .map(|i| match &self.nodes[i].kind {
                LayerKind::Conv { .. } => {
                    let g = self.conv_geometry(shapes, i).expect("conv");
                    2 * g.macs(shapes.of(i.checked_sub(1)))
                }
                LayerKind::Se => {
                    let s = shapes.of(i.checked_sub(1));
                    let h = self.se_hidden(s.channels);
                    2 * s.numel() as u64 + 4 * (s.channels * h) as u64
                }
                LayerKind::MaxPool => 3 * shapes.of(Some(i)).numel() as u64,
                LayerKind::Detect(refs) => self
                    .head_geometries(shapes)
                    .iter()
                    .zip(refs)
                    .map(|(g, &r)| 2 * g.macs(shapes.of(Some(r))))
                    .sum(),
                LayerKind::Route(_) | LayerKind::Upsample => 0,
            })
            .collect()
    }

    pub fn count_ops(&self) -> Result<u64> {
        let shapes = self.infer_shapes()?;
        Ok(self.layer_ops(&shapes).iter().sum())
    }

    /// Multiply-accumulates per node (conv, SE FC layers and stems).
    pub fn layer_macs(&self, shapes: &ShapeMap) -> Vec<u64> {
        (0..self.nodes.len())
            .map(|i| match &self.nodes[i].kind {
                LayerKind::Conv { .. } => self
                    .conv_geometry(shapes, i)
                    .expect("conv")
                    .macs(shapes.of(i.checked_sub(1))),
                LayerKind::Se => {
                    let s = shapes.of(i.checked_sub(1));
                    2 * (s.channels * self.se_hidden(s.channels)) as u64
                }
                LayerKind::Detect(refs) => self
                    .head_geometries(shapes)
                    .iter()
                    .zip(refs)
                    .map(|(g, &r)| g.macs(shapes.of(Some(r))))
                    .sum(),
                _ => 0,
            })
            .collect()
    }
}

/// Widens every convolution by `sqrt(param_factor)`, rounding each width up
/// to a multiple of 8, so the parameter count grows by roughly `param_factor`.
pub fn scale_model(graph: &NetworkGraph, param_factor: f64) -> Result<NetworkGraph> {
    if !(param_factor.is_finite() && param_factor >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "scale factor must be >= 1, got {param_factor}"
        )));
    }
    let widen = param_factor.sqrt();
    let nodes = graph
        .nodes
        .iter()
        .map(|n| {
            let kind = match n.kind {
                LayerKind::Conv {
                    kernel,
                    stride,
                    filters,
                } => LayerKind::Conv {
                    kernel,
                    stride,
                    filters: ((filters as f64 * widen / 8.0).ceil() as usize * 8).max(8),
                },
                ref k => k.clone(),
            };
            LayerNode { id: n.id, kind }
        })
        .collect();
    NetworkGraph::new(graph.config.clone(), nodes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_graph() -> NetworkGraph {
        build_squeezed_edge_yolo(NetConfig::default()).unwrap()
    }

    #[test]
    fn default_graph_has_31_nodes() {
        let g = default_graph();
        assert_eq!(g.len(), 31);
        assert_eq!(g.nodes().iter().filter(|n| n.id.section == Section::Backbone).count(), 13);
        let (i, refs) = g.detect_node().unwrap();
        assert_eq!(i, 30);
        assert_eq!(refs, &[13 + 6, 13 + 16]);
    }

    #[test]
    fn route_references_resolve() {
        let g = default_graph();
        let routes: Vec<_> = g
            .nodes()
            .iter()
            .filter_map(|n| match &n.kind {
                LayerKind::Route(r) => Some(r.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(routes, vec![vec![6, 4], vec![2, 9], vec![18], vec![23, 13]]);
    }

    #[test]
    fn shapes_match_table_rows() {
        let g = default_graph();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes.outputs, expected_outputs(NeckWidthSource::FiltersColumn));
        let s = |c, h, w| TensorShape {
            channels: c,
            height: h,
            width: w,
        };
        assert_eq!(shapes.outputs[0], Some(s(16, 64, 64)));
        assert_eq!(shapes.outputs[10], Some(s(64, 32, 32)));
        assert_eq!(shapes.outputs[13 + 12], Some(s(128, 16, 16)));
        assert_eq!(shapes.heads, vec![s(24, 8, 8), s(24, 16, 16)]);
    }

    #[test]
    fn output_column_reading_reproduces_every_entry() {
        let cfg = NetConfig {
            neck_width_source: NeckWidthSource::OutputColumn,
            ..NetConfig::default()
        };
        let g = build_squeezed_edge_yolo(cfg).unwrap();
        let published: Vec<_> = PUBLISHED_OUTPUTS
            .iter()
            .map(|&(_, _, o)| o.map(|(h, w, c)| TensorShape { channels: c, height: h, width: w }))
            .collect();
        assert_eq!(g.infer_shapes().unwrap().outputs, published);
        // this reading overshoots the published parameter budget
        assert!(g.param_count().unwrap() > 1_020_000);
    }

    #[test]
    fn parameter_total() {
        let g = default_graph();
        assert_eq!(g.param_count().unwrap(), 981_816);
    }

    #[test]
    fn classes_only_change_stems() {
        let g3 = default_graph();
        let g1 = build_squeezed_edge_yolo(NetConfig::default().with_classes(1)).unwrap();
        let diff = g3.param_count().unwrap() - g1.param_count().unwrap();
        // stems: (128 + 64 inputs + 1 bias each) * 3 anchors * (8 - 6) outputs
        assert_eq!(diff, (128 + 1 + 64 + 1) * 3 * 2);
    }

    #[test]
    fn op_counts() {
        let g = default_graph();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(g.layer_ops(&shapes)[0], 3_538_944);
        let empty = NetworkGraph::new(NetConfig::default(), vec![]).unwrap();
        assert_eq!(empty.count_ops().unwrap(), 0);
    }

    #[test]
    fn scaling() {
        let g = default_graph();
        assert_eq!(scale_model(&g, 1.0).unwrap(), g);
        let p2 = scale_model(&g, 2.0).unwrap().param_count().unwrap();
        assert!((1_580_000..=2_140_000).contains(&p2), "{p2}");
        let base = g.param_count().unwrap() as f64;
        let p4 = scale_model(&g, 4.0).unwrap().param_count().unwrap() as f64;
        assert!((p4 / base - 4.0).abs() <= 0.6, "{}", p4 / base);
        assert!(scale_model(&g, 0.5).is_err());
    }

    #[test]
    fn bad_configs() {
        assert!(build_squeezed_edge_yolo(NetConfig::default().with_input_size(100)).is_err());
        assert!(build_squeezed_edge_yolo(NetConfig::default().with_classes(0)).is_err());
        let nodes = vec![LayerNode {
            id: NodeId {
                section: Section::Backbone,
                index: 0,
            },
            kind: LayerKind::Route(vec![0]),
        }];
        assert!(NetworkGraph::new(NetConfig::default(), nodes).is_err());
    }

    #[test]
    fn spatial_contradiction_names_node() {
        let mk = |index, kind| LayerNode {
            id: NodeId {
                section: Section::Backbone,
                index,
            },
            kind,
        };
        let nodes = vec![
            mk(0, LayerKind::Conv { kernel: 3, stride: 2, filters: 8 }),
            mk(1, LayerKind::Conv { kernel: 3, stride: 2, filters: 8 }),
            mk(2, LayerKind::Route(vec![0, 1])),
        ];
        let g = NetworkGraph::new(NetConfig::default(), nodes).unwrap();
        match g.infer_shapes() {
            Err(Error::ShapeContradiction { node, .. }) => assert_eq!(node, "backbone.2"),
            other => panic!("{other:?}"),
        }
    }
}

//! SEYW: a flat, little-endian weight archive.
//!
//! ```text
//! file    := "SEYW" version:u32 count:u32 record*
//! record  := name_len:u16 name:utf8 dtype:u8 rank:u8 dims:u32*rank
//!            [ nq:u32 scales:f32*nq zero_points:i8*nq ]   -- only when dtype = i8
//!            pad-to-4 payload pad-to-4
//! dtype   := 0 (f32) | 1 (i8) | 2 (i32)
//! ```
//!
//! Int8 weight records carry one `(scale, zero_point)` per output row.
//! Int8 archives also carry `quant.activations`, an `f32 [n, 2]` table of
//! activation `(scale, zero_point)` pairs in network order.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{
    FloatModel, FloatNodeParams, LayerKind, Model, ModelMode, NetworkGraph, QuantModel,
    QuantNodeParams,
};
use crate::kernels::{Activation, ConvGeometry, ConvSpec, QConvSpec, QSeSpec, SeSpec};
use crate::qtensor::{FloatTensor, QuantParams};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SEYW";
pub const VERSION: u32 = 1;
pub const ACTIVATIONS_RECORD: &str = "quant.activations";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8 {
        data: Vec<i8>,
        qparams: Vec<QuantParams>,
    },
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::I8 { .. } => "i8",
            TensorData::I32(_) => "i32",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I8 { data, .. } => data.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    fn elem_bytes(&self) -> usize {
        match self {
            TensorData::I8 { .. } => 1,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl ArchiveTensor {
    pub fn payload_bytes(&self) -> usize {
        self.data.len() * self.data.elem_bytes()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightArchive {
    pub tensors: Vec<ArchiveTensor>,
}

fn pad4(buf: &mut Vec<u8>) {
    while buf.len() % 4 != 0 {
        buf.push(0);
    }
}

impl WeightArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + self.payload_bytes() + 64 * self.tensors.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            let dtype = match t.data {
                TensorData::F32(_) => 0u8,
                TensorData::I8 { .. } => 1,
                TensorData::I32(_) => 2,
            };
            buf.push(dtype);
            buf.push(t.dims.len() as u8);
            for &d in &t.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            if let TensorData::I8 { qparams, .. } = &t.data {
                buf.extend_from_slice(&(qparams.len() as u32).to_le_bytes());
                for qp in qparams {
                    buf.extend_from_slice(&qp.scale.to_le_bytes());
                }
                for qp in qparams {
                    buf.push(qp.zero_point as i8 as u8);
                }
            }
            pad4(&mut buf);
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
                TensorData::I8 { data, .. } => buf.extend(data.iter().map(|&x| x as u8)),
                TensorData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            }
            pad4(&mut buf);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptArchive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptArchive(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors: Vec<ArchiveTensor> = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptArchive("tensor name is not UTF-8".into()))?
                .to_string();
            if tensors.iter().any(|t| t.name == name) {
                return Err(Error::CorruptArchive(format!("duplicate tensor {name}")));
            }
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::CorruptArchive(format!("{name}: dimensions overflow"))
            })?;
            let qparams = if dtype == 1 {
                let nq = r.u32()? as usize;
                let scales = (0..nq).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                let zps = r.take(nq)?;
                scales
                    .into_iter()
                    .zip(zps)
                    .map(|(s, &z)| {
                        QuantParams::new(s, z as i8 as i32)
                            .map_err(|e| Error::CorruptArchive(format!("{name}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            r.align4();
            let data = match dtype {
                0 => TensorData::F32(r.take_n(numel, 4)?.chunks_exact(4).map(|c| {
                    f32::from_le_bytes(c.try_into().expect("4 bytes"))
                }).collect()),
                1 => TensorData::I8 {
                    data: r.take_n(numel, 1)?.iter().map(|&b| b as i8).collect(),
                    qparams,
                },
                2 => TensorData::I32(r.take_n(numel, 4)?.chunks_exact(4).map(|c| {
                    i32::from_le_bytes(c.try_into().expect("4 bytes"))
                }).collect()),
                other => return Err(Error::CorruptArchive(format!("{name}: unknown dtype {other}"))),
            };
            r.align4();
            tensors.push(ArchiveTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptArchive(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { tensors })
    }

    /// Raw tensor bytes, excluding headers and padding.
    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(ArchiveTensor::payload_bytes).sum()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptArchive(format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_n(&mut self, n: usize, size: usize) -> Result<&'a [u8]> {
        let bytes = n
            .checked_mul(size)
            .ok_or_else(|| Error::CorruptArchive("payload size overflows".into()))?;
        self.take(bytes)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn align4(&mut self) {
        self.pos = self.pos.div_ceil(4) * 4;
    }
}

fn conv_dims(g: &ConvGeometry) -> Vec<usize> {
    vec![g.out_channels, g.in_channels, g.kernel, g.kernel]
}

fn qparams_of(scales: &[f32]) -> Vec<QuantParams> {
    scales
        .iter()
        .map(|&scale| QuantParams {
            scale,
            zero_point: 0,
        })
        .collect()
}

fn push_activation(table: &mut Vec<f32>, qp: QuantParams) {
    table.push(qp.scale);
    table.push(qp.zero_point as f32);
}

/// Canonical archive records for a model, in network order.
pub fn archive_model(model: &Model) -> WeightArchive {
    let graph = model.graph();
    let mut tensors = Vec::new();
    let mut put = |name: String, dims: Vec<usize>, data: TensorData| {
        tensors.push(ArchiveTensor { name, dims, data })
    };
    match model {
        Model::Float(m) => {
            for (i, p) in m.params().iter().enumerate() {
                let label = graph.label(i);
                match p {
                    FloatNodeParams::Conv(c) => {
                        put(format!("{label}.conv.weight"), conv_dims(&c.geometry), TensorData::F32(c.weights.clone()));
                        put(format!("{label}.conv.bias"), vec![c.bias.len()], TensorData::F32(c.bias.clone()));
                    }
                    FloatNodeParams::Se(s) => {
                        put(format!("{label}.se.fc1.weight"), vec![s.hidden, s.channels], TensorData::F32(s.fc1_weight.clone()));
                        put(format!("{label}.se.fc1.bias"), vec![s.hidden], TensorData::F32(s.fc1_bias.clone()));
                        put(format!("{label}.se.fc2.weight"), vec![s.channels, s.hidden], TensorData::F32(s.fc2_weight.clone()));
                        put(format!("{label}.se.fc2.bias"), vec![s.channels], TensorData::F32(s.fc2_bias.clone()));
                    }
                    FloatNodeParams::Detect(stems) => {
                        for (k, c) in stems.iter().enumerate() {
                            put(format!("{label}.head{k}.weight"), conv_dims(&c.geometry), TensorData::F32(c.weights.clone()));
                            put(format!("{label}.head{k}.bias"), vec![c.bias.len()], TensorData::F32(c.bias.clone()));
                        }
                    }
                    FloatNodeParams::None => {}
                }
            }
        }
        Model::Int8(m) => {
            let mut table = Vec::new();
            push_activation(&mut table, m.input_qparams());
            let qconv = |put: &mut dyn FnMut(String, Vec<usize>, TensorData), prefix: String, c: &QConvSpec| {
                put(
                    format!("{prefix}.weight"),
                    conv_dims(&c.geometry),
                    TensorData::I8 {
                        data: c.weights.clone(),
                        qparams: qparams_of(&c.weight_scales),
                    },
                );
                put(format!("{prefix}.bias"), vec![c.bias.len()], TensorData::I32(c.bias.clone()));
            };
            for (i, p) in m.params().iter().enumerate() {
                let label = graph.label(i);
                match p {
                    QuantNodeParams::Conv(c) => {
                        qconv(&mut put, format!("{label}.conv"), c);
                        push_activation(&mut table, c.output);
                    }
                    QuantNodeParams::Se(s) => {
                        put(
                            format!("{label}.se.fc1.weight"),
                            vec![s.hidden, s.channels],
                            TensorData::I8 {
                                data: s.fc1_weight.clone(),
                                qparams: qparams_of(&s.fc1_scales),
                            },
                        );
                        put(format!("{label}.se.fc1.bias"), vec![s.hidden], TensorData::I32(s.fc1_bias.clone()));
                        put(
                            format!("{label}.se.fc2.weight"),
                            vec![s.channels, s.hidden],
                            TensorData::I8 {
                                data: s.fc2_weight.clone(),
                                qparams: qparams_of(&s.fc2_scales),
                            },
                        );
                        put(format!("{label}.se.fc2.bias"), vec![s.channels], TensorData::I32(s.fc2_bias.clone()));
                        for qp in [s.pool, s.hidden_q, s.logit, s.output] {
                            push_activation(&mut table, qp);
                        }
                    }
                    QuantNodeParams::Route(qp) => push_activation(&mut table, *qp),
                    QuantNodeParams::Detect(stems) => {
                        for (k, c) in stems.iter().enumerate() {
                            qconv(&mut put, format!("{label}.head{k}"), c);
                            push_activation(&mut table, c.output);
                        }
                    }
                    QuantNodeParams::None => {}
                }
            }
            put(ACTIVATIONS_RECORD.into(), vec![table.len() / 2, 2], TensorData::F32(table));
        }
    }
    WeightArchive { tensors }
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, archive_model(model).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<WeightArchive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightArchive::from_bytes(&bytes)
}

/// Loads weights for `graph`. The archive's dtypes decide the mode; every
/// graph tensor must be present exactly once and nothing else may be.
pub fn load_weights(path: impl AsRef<Path>, graph: &NetworkGraph) -> Result<Model> {
    bind_archive(read_archive(path)?, graph)
}

/// As [`load_weights`], additionally requiring a specific execution mode.
pub fn load_weights_as(path: impl AsRef<Path>, graph: &NetworkGraph, mode: ModelMode) -> Result<Model> {
    let archive = read_archive(path)?;
    let found = archive_mode(&archive);
    if found != mode {
        let name = archive.tensors.first().map_or_else(|| "<archive>".to_string(), |t| t.name.clone());
        return Err(Error::DtypeMismatch {
            name,
            expected: if mode == ModelMode::Int8 { "i8" } else { "f32" },
            actual: if found == ModelMode::Int8 { "i8" } else { "f32" },
        });
    }
    bind_archive(archive, graph)
}

fn archive_mode(archive: &WeightArchive) -> ModelMode {
    let quantized = archive
        .tensors
        .iter()
        .any(|t| t.name == ACTIVATIONS_RECORD || matches!(t.data, TensorData::I8 { .. }));
    if quantized {
        ModelMode::Int8
    } else {
        ModelMode::Float
    }
}

struct Binder {
    tensors: Vec<Option<ArchiveTensor>>,
}

impl Binder {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<TensorData> {
        let slot = self
            .tensors
            .iter_mut()
            .find(|t| t.as_ref().is_some_and(|t| t.name == name))
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let t = slot.take().expect("found above");
        if t.dims != dims {
            return Err(Error::TensorShapeMismatch {
                name: name.to_string(),
                expected: dims.to_vec(),
                actual: t.dims,
            });
        }
        Ok(t.data)
    }

    fn f32(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        match self.take(name, dims)? {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                name: name.into(),
                expected: "f32",
                actual: other.dtype_name(),
            }),
        }
    }

    fn i32(&mut self, name: &str, dims: &[usize]) -> Result<Vec<i32>> {
        match self.take(name, dims)? {
            TensorData::I32(v) => Ok(v),
            other => Err(Error::DtypeMismatch {
                name: name.into(),
                expected: "i32",
                actual: other.dtype_name(),
            }),
        }
    }

    /// Per-row symmetric int8 weights.
    fn i8_rows(&mut self, name: &str, dims: &[usize]) -> Result<(Vec<i8>, Vec<f32>)> {
        match self.take(name, dims)? {
            TensorData::I8 { data, qparams } => {
                if qparams.len() != dims[0] || qparams.iter().any(|q| q.zero_point != 0) {
                    return Err(Error::CorruptArchive(format!(
                        "{name}: expected {} symmetric row scales",
                        dims[0]
                    )));
                }
                Ok((data, qparams.iter().map(|q| q.scale).collect()))
            }
            other => Err(Error::DtypeMismatch {
                name: name.into(),
                expected: "i8",
                actual: other.dtype_name(),
            }),
        }
    }

    fn finish(self) -> Result<()> {
        match self.tensors.into_iter().flatten().next() {
            Some(extra) => Err(Error::UnexpectedTensor(extra.name)),
            None => Ok(()),
        }
    }
}

struct ActivationTable {
    rows: Vec<QuantParams>,
    next: usize,
}

impl ActivationTable {
    fn next(&mut self) -> Result<QuantParams> {
        let qp = self.rows.get(self.next).copied().ok_or_else(|| {
            Error::CorruptArchive(format!("{ACTIVATIONS_RECORD} has too few rows"))
        })?;
        self.next += 1;
        Ok(qp)
    }
}

/// Binds archive tensors to `graph`. Either every parameter binds or an
/// error is returned and nothing is constructed.
pub fn bind_archive(archive: WeightArchive, graph: &NetworkGraph) -> Result<Model> {
    let mode = archive_mode(&archive);
    let shapes = graph.infer_shapes()?;
    let heads = graph.head_geometries(&shapes);
    let slope = graph.config().leaky_slope;
    let mut b = Binder {
        tensors: archive.tensors.into_iter().map(Some).collect(),
    };

    let model = match mode {
        ModelMode::Float => {
            let mut params = Vec::with_capacity(graph.len());
            for (i, node) in graph.nodes().iter().enumerate() {
                let label = graph.label(i);
                let mut conv = |prefix: String, g: ConvGeometry, act: Activation| -> Result<ConvSpec> {
                    Ok(ConvSpec {
                        geometry: g,
                        weights: b.f32(&format!("{prefix}.weight"), &conv_dims(&g))?,
                        bias: b.f32(&format!("{prefix}.bias"), &[g.out_channels])?,
                        activation: act,
                    })
                };
                let p = match &node.kind {
                    LayerKind::Conv { .. } => FloatNodeParams::Conv(conv(
                        format!("{label}.conv"),
                        graph.conv_geometry(&shapes, i).expect("conv"),
                        Activation::LeakyRelu(slope),
                    )?),
                    LayerKind::Detect(_) => FloatNodeParams::Detect(
                        heads
                            .iter()
                            .enumerate()
                            .map(|(k, g)| conv(format!("{label}.head{k}"), *g, Activation::Linear))
                            .collect::<Result<_>>()?,
                    ),
                    LayerKind::Se => {
                        let c = shapes.of(i.checked_sub(1)).channels;
                        let h = graph.se_hidden(c);
                        FloatNodeParams::Se(SeSpec {
                            channels: c,
                            hidden: h,
                            fc1_weight: b.f32(&format!("{label}.se.fc1.weight"), &[h, c])?,
                            fc1_bias: b.f32(&format!("{label}.se.fc1.bias"), &[h])?,
                            fc2_weight: b.f32(&format!("{label}.se.fc2.weight"), &[c, h])?,
                            fc2_bias: b.f32(&format!("{label}.se.fc2.bias"), &[c])?,
                        })
                    }
                    _ => FloatNodeParams::None,
                };
                params.push(p);
            }
            Model::Float(FloatModel::new(graph.clone(), params)?)
        }
        ModelMode::Int8 => {
            let slots = b
                .tensors
                .iter()
                .flatten()
                .find(|t| t.name == ACTIVATIONS_RECORD)
                .map(|t| t.dims.first().copied().unwrap_or(0))
                .ok_or_else(|| Error::MissingTensor(ACTIVATIONS_RECORD.into()))?;
            let raw = b.f32(ACTIVATIONS_RECORD, &[slots, 2])?;
            let rows = raw
                .chunks_exact(2)
                .enumerate()
                .map(|(k, r)| {
                    QuantParams::new(r[0], r[1] as i32).map_err(|e| {
                        Error::CorruptArchive(format!("{ACTIVATIONS_RECORD} row {k}: {e}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut acts = ActivationTable { rows, next: 0 };
            let input = acts.next()?;
            let mut params = Vec::with_capacity(graph.len());
            for (i, node) in graph.nodes().iter().enumerate() {
                let label = graph.label(i);
                let qconv = |b: &mut Binder, acts: &mut ActivationTable, prefix: String, g: ConvGeometry, act: Activation| -> Result<QConvSpec> {
                    let (weights, weight_scales) = b.i8_rows(&format!("{prefix}.weight"), &conv_dims(&g))?;
                    Ok(QConvSpec {
                        geometry: g,
                        weights,
                        weight_scales,
                        bias: b.i32(&format!("{prefix}.bias"), &[g.out_channels])?,
                        activation: act,
                        output: acts.next()?,
                    })
                };
                let p = match &node.kind {
                    LayerKind::Conv { .. } => QuantNodeParams::Conv(qconv(
                        &mut b,
                        &mut acts,
                        format!("{label}.conv"),
                        graph.conv_geometry(&shapes, i).expect("conv"),
                        Activation::LeakyRelu(slope),
                    )?),
                    LayerKind::Detect(_) => QuantNodeParams::Detect(
                        heads
                            .iter()
                            .enumerate()
                            .map(|(k, g)| qconv(&mut b, &mut acts, format!("{label}.head{k}"), *g, Activation::Linear))
                            .collect::<Result<_>>()?,
                    ),
                    LayerKind::Se => {
                        let c = shapes.of(i.checked_sub(1)).channels;
                        let h = graph.se_hidden(c);
                        let (fc1_weight, fc1_scales) = b.i8_rows(&format!("{label}.se.fc1.weight"), &[h, c])?;
                        let fc1_bias = b.i32(&format!("{label}.se.fc1.bias"), &[h])?;
                        let (fc2_weight, fc2_scales) = b.i8_rows(&format!("{label}.se.fc2.weight"), &[c, h])?;
                        let fc2_bias = b.i32(&format!("{label}.se.fc2.bias"), &[c])?;
                        QuantNodeParams::Se(QSeSpec {
                            channels: c,
                            hidden: h,
                            fc1_weight,
                            fc1_scales,
                            fc1_bias,
                            fc2_weight,
                            fc2_scales,
                            fc2_bias,
                            pool: acts.next()?,
                            hidden_q: acts.next()?,
                            logit: acts.next()?,
                            output: acts.next()?,
                        })
                    }
                    LayerKind::Route(_) => QuantNodeParams::Route(acts.next()?),
                    LayerKind::MaxPool | LayerKind::Upsample => QuantNodeParams::None,
                };
                params.push(p);
            }
            if acts.next != acts.rows.len() {
                return Err(Error::CorruptArchive(format!(
                    "{ACTIVATIONS_RECORD} has {} rows, graph uses {}",
                    acts.rows.len(),
                    acts.next
                )));
            }
            Model::Int8(QuantModel::new(graph.clone(), input, params)?)
        }
    };
    b.finish()?;
    Ok(model)
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases,
/// drawn in network order from a seeded stream.
pub fn init_random_weights(graph: &NetworkGraph, seed: u64) -> FloatModel {
    init_weights_with_gain(graph, seed, 1.0)
}

/// As [`init_random_weights`] with the bound multiplied by `gain`.
pub fn init_weights_with_gain(graph: &NetworkGraph, seed: u64, gain: f32) -> FloatModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fill = |n: usize, fan_in: usize| -> Vec<f32> {
        let b = gain / (fan_in as f32).sqrt();
        (0..n).map(|_| rng.gen_range(-b..=b)).collect()
    };
    let mut model = FloatModel::zeros(graph.clone()).expect("graph shapes were validated");
    for p in model.params_mut() {
        match p {
            FloatNodeParams::Conv(c) => {
                let g = c.geometry;
                c.weights = fill(g.weight_len(), g.in_channels * g.kernel * g.kernel);
            }
            FloatNodeParams::Se(s) => {
                s.fc1_weight = fill(s.fc1_weight.len(), s.channels);
                s.fc2_weight = fill(s.fc2_weight.len(), s.hidden);
            }
            FloatNodeParams::Detect(stems) => {
                for c in stems {
                    c.weights = fill(c.geometry.weight_len(), c.geometry.in_channels);
                }
            }
            FloatNodeParams::None => {}
        }
    }
    model
}

/// Sets one shared objectness bias on every detection stem so the float
/// model emits `target_mean` detections per image on `images`, on average.
/// Returns the bias. Heads are affine in that bias, so the forward passes
/// run once and the bisection works on cached logits.
pub fn calibrate_objectness(
    model: &mut FloatModel,
    images: &[FloatTensor],
    target_mean: f64,
    conf_threshold: f32,
    nms_iou: f32,
) -> Result<f32> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("objectness calibration needs at least one image".into()));
    }
    let graph = model.graph().clone();
    let per_anchor = 5 + graph.config().num_classes;
    let obj_channels = |c: usize| c % per_anchor == 4;
    let current: Vec<Vec<f32>> = match model.params().last() {
        Some(FloatNodeParams::Detect(stems)) => stems.iter().map(|s| s.bias.clone()).collect(),
        _ => return Err(Error::InvalidConfig("graph has no detection stems".into())),
    };
    let raw: Vec<Vec<FloatTensor>> = images
        .iter()
        .map(|img| {
            let heads = model.execute(img)?;
            Ok(heads
                .into_iter()
                .zip(&current)
                .map(|(h, bias)| shift_objectness(h, |c| if obj_channels(c) { -bias[c] } else { 0.0 }))
                .collect())
        })
        .collect::<Result<_>>()?;
    let mean_at = |b: f32| -> Result<f64> {
        let mut total = 0;
        for heads in &raw {
            let shifted: Vec<FloatTensor> = heads
                .iter()
                .map(|h| shift_objectness(h.clone(), |c| if obj_channels(c) { b } else { 0.0 }))
                .collect();
            total += crate::detect::detect_objects(&graph, &shifted, conf_threshold, nms_iou)?.len();
        }
        Ok(total as f64 / raw.len() as f64)
    };
    let (mut lo, mut hi) = (-40f32, 40f32);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_at(mid)? > target_mean {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    if let Some(FloatNodeParams::Detect(stems)) = model.params_mut().last_mut() {
        for stem in stems {
            for (c, v) in stem.bias.iter_mut().enumerate() {
                if obj_channels(c) {
                    *v = b;
                }
            }
        }
    }
    Ok(b)
}

fn shift_objectness(head: FloatTensor, delta: impl Fn(usize) -> f32) -> FloatTensor {
    let shape = head.shape();
    let plane = shape.plane();
    let mut data = head.into_data();
    for (c, chunk) in data.chunks_mut(plane).enumerate() {
        let d = delta(c);
        if d != 0.0 {
            chunk.iter_mut().for_each(|v| *v += d);
        }
    }
    FloatTensor::new(shape, data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_squeezed_edge_yolo, NetConfig};

    fn graph() -> NetworkGraph {
        build_squeezed_edge_yolo(NetConfig::default()).unwrap()
    }

    #[test]
    fn empty_archive_is_valid() {
        let bytes = WeightArchive::default().to_bytes();
        assert_eq!(bytes.len(), 12);
        assert_eq!(WeightArchive::from_bytes(&bytes).unwrap(), WeightArchive::default());
    }

    #[test]
    fn float_roundtrip_and_seed_determinism() {
        let g = graph();
        let m = Model::Float(init_random_weights(&g, 5));
        let bytes = archive_model(&m).to_bytes();
        assert_eq!(bytes.len() % 4, 0);
        let back = bind_archive(WeightArchive::from_bytes(&bytes).unwrap(), &g).unwrap();
        assert_eq!(back, m);

        let same = archive_model(&Model::Float(init_random_weights(&g, 5))).to_bytes();
        assert_eq!(same, bytes);
        let other = archive_model(&Model::Float(init_random_weights(&g, 6))).to_bytes();
        assert_ne!(other, bytes);
    }

    #[test]
    fn missing_bias_is_named() {
        let g = graph();
        let mut a = archive_model(&Model::Float(init_random_weights(&g, 1)));
        a.tensors.retain(|t| t.name != "neck.3.conv.bias");
        match bind_archive(a, &g) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "neck.3.conv.bias"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extra_and_misshaped_tensors_are_rejected() {
        let g = graph();
        let mut a = archive_model(&Model::Float(init_random_weights(&g, 1)));
        a.tensors.push(ArchiveTensor {
            name: "stray".into(),
            dims: vec![1],
            data: TensorData::F32(vec![0.0]),
        });
        assert!(matches!(bind_archive(a.clone(), &g), Err(Error::UnexpectedTensor(n)) if n == "stray"));

        a.tensors.pop();
        a.tensors[0].dims = vec![16, 3, 1, 9];
        assert!(matches!(
            bind_archive(a, &g),
            Err(Error::TensorShapeMismatch { name, .. }) if name == "backbone.0.conv.weight"
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let g = graph();
        let bytes = archive_model(&Model::Float(init_random_weights(&g, 1))).to_bytes();
        for cut in [0, 3, 11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                WeightArchive::from_bytes(&bytes[..cut]),
                Err(Error::CorruptArchive(_))
            ));
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightArchive::from_bytes(&bad), Err(Error::CorruptArchive(_))));
    }

    #[test]
    fn random_weights_keep_activations_finite() {
        let g = graph();
        let m = init_random_weights(&g, 9);
        let s = g.config().input_shape;
        let img = FloatTensor::new(s, (0..s.numel()).map(|i| (i % 251) as f32 / 251.0).collect()).unwrap();
        let mut finite = true;
        let mut seen = 0;
        m.execute_with(&img, crate::kernels::Exec::Sequential, &mut |p, v| {
            if matches!(p, crate::graph::ProbePoint::Output(_) | crate::graph::ProbePoint::Head(_)) {
                seen += 1;
            }
            finite &= v.iter().all(|x| x.is_finite());
        })
        .unwrap();
        assert!(finite);
        assert_eq!(seen, 30 + 2);
    }

    #[test]
    fn int8_archive_roundtrip_and_overhead() {
        let g = graph();
        let float = init_random_weights(&g, 3);
        let s = g.config().input_shape;
        let img = FloatTensor::new(s, (0..s.numel()).map(|i| (i % 251) as f32 / 251.0).collect()).unwrap();
        let ranges = float.collect_ranges(std::slice::from_ref(&img)).unwrap();
        let m = Model::Int8(crate::graph::quantize_model(&float, &ranges).unwrap());
        let archive = archive_model(&m);
        let bytes = archive.to_bytes();
        let back = bind_archive(WeightArchive::from_bytes(&bytes).unwrap(), &g).unwrap();
        assert_eq!(back, m);

        // weights and biases only: 1 byte per i8, 4 per i32
        let payload: usize = archive
            .tensors
            .iter()
            .filter(|t| t.name != ACTIVATIONS_RECORD)
            .map(|t| t.payload_bytes())
            .sum();
        let biases: usize = archive
            .tensors
            .iter()
            .filter(|t| matches!(t.data, TensorData::I32(_)))
            .map(|t| t.dims.iter().product::<usize>())
            .sum();
        assert_eq!(payload, 981_816 + 3 * biases);
        assert!(((bytes.len() - payload) as f64) < 0.02 * payload as f64, "{} of {payload}", bytes.len() - payload);
    }

    #[test]
    fn objectness_calibration_hits_target() {
        let g = graph();
        let mut m = init_random_weights(&g, 4);
        let s = g.config().input_shape;
        let imgs: Vec<FloatTensor> = (0..4)
            .map(|k| FloatTensor::new(s, (0..s.numel()).map(|i| ((i * (k + 3)) % 97) as f32 / 97.0).collect()).unwrap())
            .collect();
        let b = calibrate_objectness(&mut m, &imgs, 2.0, 0.25, 0.45).unwrap();
        let mean = imgs
            .iter()
            .map(|img| crate::detect::detect_objects(&g, &m.execute(img).unwrap(), 0.25, 0.45).unwrap().len())
            .sum::<usize>() as f64
            / 4.0;
        assert!(b.is_finite());
        assert!((1.0..=3.0).contains(&mean), "mean {mean}");
    }

    #[test]
    fn bounds_follow_fan_in() {
        let g = graph();
        let m = init_random_weights(&g, 2);
        if let FloatNodeParams::Conv(c) = &m.params()[0] {
            let b = 1.0 / 27f32.sqrt();
            assert!(c.weights.iter().all(|w| w.abs() <= b));
            assert!(c.bias.iter().all(|&v| v == 0.0));
        } else {
            panic!("first node is a conv");
        }
    }
}

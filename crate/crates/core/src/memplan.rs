//! Analytic model of a three-level scratchpad hierarchy (L1 cluster memory,
//! L2 on-chip RAM, L3 off-chip RAM) with a tiling planner, a per-layer cycle
//! model and an occupancy trace.
//!
//! L2<->L1 copies run on the cluster DMA (CDMA), L3<->L2 copies on the micro
//! DMA (MDMA). A DMA group of `n` transfers moving `b` bytes costs
//! `n * dma_setup_cycles + ceil(b / bytes_per_cycle)`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::{LayerKind, NetworkGraph};
use crate::kernels::{param_count, ConvGeometry};
use crate::qtensor::TensorShape;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareModel {
    pub l1_bytes: u64,
    pub l2_bytes: u64,
    pub l3_bytes: u64,
    pub cluster_cores: u32,
    pub cluster_hz: f64,
    pub fabric_hz: f64,
    pub l1_access_cycles: u32,
    pub l2_access_cycles: u32,
    pub dma_setup_cycles: u64,
    pub l3_dma_bytes_per_cycle: f64,
    pub l2_dma_bytes_per_cycle: f64,
    pub effective_macs_per_core_cycle: f64,
}

impl Default for HardwareModel {
    fn default() -> Self {
        Self {
            l1_bytes: 65_536,
            l2_bytes: 524_288,
            l3_bytes: 8 * 1024 * 1024,
            cluster_cores: 8,
            cluster_hz: 175e6,
            fabric_hz: 250e6,
            l1_access_cycles: 1,
            l2_access_cycles: 4,
            dma_setup_cycles: 100,
            l3_dma_bytes_per_cycle: 4.0,
            l2_dma_bytes_per_cycle: 8.0,
            effective_macs_per_core_cycle: 1.0,
        }
    }
}

const HW_KEYS: [&str; 12] = [
    "l1_bytes",
    "l2_bytes",
    "l3_bytes",
    "cluster_cores",
    "cluster_hz",
    "fabric_hz",
    "l1_access_cycles",
    "l2_access_cycles",
    "dma_setup_cycles",
    "l3_dma_bytes_per_cycle",
    "l2_dma_bytes_per_cycle",
    "effective_macs_per_core_cycle",
];

impl HardwareModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::HardwareConfig { line: 0, detail });
        if !(self.l1_bytes < self.l2_bytes && self.l2_bytes < self.l3_bytes) {
            return bad(format!(
                "need l1 < l2 < l3, got {} / {} / {}",
                self.l1_bytes, self.l2_bytes, self.l3_bytes
            ));
        }
        let ints = [
            self.l1_bytes,
            self.cluster_cores as u64,
            self.l1_access_cycles as u64,
            self.l2_access_cycles as u64,
            self.dma_setup_cycles,
        ];
        let reals = [
            self.cluster_hz,
            self.fabric_hz,
            self.l3_dma_bytes_per_cycle,
            self.l2_dma_bytes_per_cycle,
            self.effective_macs_per_core_cycle,
        ];
        if ints.contains(&0) || reals.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("all parameters must be positive".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Keys not named are
    /// left at their defaults; unknown or repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut hw = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |detail: String| Error::HardwareConfig {
                line: line_no,
                detail,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !HW_KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if seen.contains(&key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            let real = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("`{key}`: not a number: `{value}`")))
            };
            let int = || -> Result<u64> {
                value
                    .parse::<u64>()
                    .map_err(|_| err(format!("`{key}`: not a non-negative integer: `{value}`")))
            };
            let small = || -> Result<u32> {
                u32::try_from(int()?).map_err(|_| err(format!("`{key}`: out of range")))
            };
            match key {
                "l1_bytes" => hw.l1_bytes = int()?,
                "l2_bytes" => hw.l2_bytes = int()?,
                "l3_bytes" => hw.l3_bytes = int()?,
                "cluster_cores" => hw.cluster_cores = small()?,
                "cluster_hz" => hw.cluster_hz = real()?,
                "fabric_hz" => hw.fabric_hz = real()?,
                "l1_access_cycles" => hw.l1_access_cycles = small()?,
                "l2_access_cycles" => hw.l2_access_cycles = small()?,
                "dma_setup_cycles" => hw.dma_setup_cycles = int()?,
                "l3_dma_bytes_per_cycle" => hw.l3_dma_bytes_per_cycle = real()?,
                "l2_dma_bytes_per_cycle" => hw.l2_dma_bytes_per_cycle = real()?,
                "effective_macs_per_core_cycle" => hw.effective_macs_per_core_cycle = real()?,
                _ => unreachable!("key list checked above"),
            }
        }
        hw.validate()?;
        Ok(hw)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "l1_bytes = {}\nl2_bytes = {}\nl3_bytes = {}\ncluster_cores = {}\ncluster_hz = {}\n\
             fabric_hz = {}\nl1_access_cycles = {}\nl2_access_cycles = {}\ndma_setup_cycles = {}\n\
             l3_dma_bytes_per_cycle = {}\nl2_dma_bytes_per_cycle = {}\neffective_macs_per_core_cycle = {}\n",
            self.l1_bytes,
            self.l2_bytes,
            self.l3_bytes,
            self.cluster_cores,
            self.cluster_hz,
            self.fabric_hz,
            self.l1_access_cycles,
            self.l2_access_cycles,
            self.dma_setup_cycles,
            self.l3_dma_bytes_per_cycle,
            self.l2_dma_bytes_per_cycle,
            self.effective_macs_per_core_cycle
        )
    }

    /// Cycles to run `ops` multiply-accumulates across the cluster.
    pub fn compute_cycles(&self, ops: u64) -> u64 {
        (ops as f64 / (self.cluster_cores as f64 * self.effective_macs_per_core_cycle)).ceil() as u64
    }

    pub fn dma_cycles(&self, t: &Transfer) -> u64 {
        let bw = match t.engine() {
            DmaEngine::Mdma => self.l3_dma_bytes_per_cycle,
            DmaEngine::Cdma => self.l2_dma_bytes_per_cycle,
        };
        t.count * self.dma_setup_cycles + (t.bytes as f64 / bw).ceil() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MemLevel {
    L1,
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DmaEngine {
    Cdma,
    Mdma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Input,
    Weights,
    Output,
}

/// `count` DMA commands moving `bytes` in total from `src` to `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub src: MemLevel,
    pub dst: MemLevel,
    pub payload: Payload,
    pub bytes: u64,
    pub count: u64,
}

impl Transfer {
    pub fn engine(&self) -> DmaEngine {
        if self.src == MemLevel::L3 || self.dst == MemLevel::L3 {
            DmaEngine::Mdma
        } else {
            DmaEngine::Cdma
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub node: usize,
    pub label: String,
    /// Output tile for convolutions; `None` for streamed layers.
    pub tile: Option<Tile>,
    pub input_level: MemLevel,
    pub weight_level: MemLevel,
    pub output_level: MemLevel,
    pub double_buffered: bool,
    pub working_set_bytes: u64,
    pub transfers: Vec<Transfer>,
    /// Multiply-accumulate equivalents executed on the cores.
    pub ops: u64,
    pub compute_cycles: u64,
    pub cdma_cycles: u64,
    pub mdma_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub layers: Vec<LayerPlan>,
    pub weight_bytes: u64,
    pub resident_weight_bytes: u64,
    pub peak_activation_bytes: u64,
    pub peak_l1_bytes: u64,
    pub peak_l2_bytes: u64,
}

impl TilePlan {
    fn traffic(&self, engine: DmaEngine) -> u64 {
        self.layers
            .iter()
            .flat_map(|l| &l.transfers)
            .filter(|t| t.engine() == engine)
            .map(|t| t.bytes)
            .sum()
    }

    /// Bytes moved between L3 and L2 per inference.
    pub fn l3_traffic_bytes(&self) -> u64 {
        self.traffic(DmaEngine::Mdma)
    }

    pub fn l2_traffic_bytes(&self) -> u64 {
        self.traffic(DmaEngine::Cdma)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    /// One byte per parameter.
    pub weight_bytes: u64,
    pub input_bytes: u64,
    pub peak_activation_bytes: u64,
}

/// Live int8 activation bytes while each node runs. Single-input routes
/// alias their source and extend its lifetime.
fn live_bytes(graph: &NetworkGraph, shapes: &crate::graph::ShapeMap) -> Vec<u64> {
    let n = graph.len();
    // buffer of each slot; slot 0 is the network input, slot i + 1 is node i
    let mut buffer: Vec<usize> = (0..=n).collect();
    let mut bytes = vec![0u64; n + 1];
    bytes[0] = shapes.input.numel() as u64;
    for (i, node) in graph.nodes().iter().enumerate() {
        match &node.kind {
            LayerKind::Route(refs) if refs.len() == 1 => buffer[i + 1] = buffer[refs[0] + 1],
            LayerKind::Detect(_) => bytes[i + 1] = shapes.heads.iter().map(|s| s.numel() as u64).sum(),
            _ => bytes[i + 1] = shapes.outputs[i].map_or(0, |s| s.numel() as u64),
        }
    }
    let mut end: Vec<usize> = (0..=n).map(|b| b.saturating_sub(1)).collect();
    for (slot, last) in graph.last_consumers().into_iter().enumerate() {
        if let Some(last) = last {
            let b = buffer[slot];
            end[b] = end[b].max(last);
        }
    }
    (0..n)
        .map(|i| {
            (0..=n)
                .filter(|&b| buffer[b] == b)
                .filter(|&b| {
                    let birth = b.saturating_sub(1);
                    let born = b == 0 || birth <= i;
                    born && end[b] >= i
                })
                .map(|b| bytes[b])
                .sum()
        })
        .collect()
}

pub fn footprint(graph: &NetworkGraph) -> Result<Footprint> {
    let shapes = graph.infer_shapes()?;
    let input_bytes = shapes.input.numel() as u64;
    let live = live_bytes(graph, &shapes);
    Ok(Footprint {
        weight_bytes: graph.layer_params(&shapes).iter().sum::<usize>() as u64,
        input_bytes,
        peak_activation_bytes: live.into_iter().max().unwrap_or(0).max(input_bytes),
    })
}

/// Candidate tile extents: the smallest extent giving each possible tile
/// count, `ceil(n / m)` for `m = 1..=n`, in increasing order.
pub fn tile_candidates(n: usize) -> Vec<usize> {
    let mut c: Vec<usize> = (1..=n).map(|m| n.div_ceil(m)).collect();
    c.reverse();
    c.dedup();
    c
}

/// Input rows (or columns) read by output tiles of extent `tile` along an
/// axis of `out` outputs, summed over tiles, clipped to the `len` real inputs.
fn halo_sum(out: usize, tile: usize, len: usize, kernel: usize, stride: usize) -> u64 {
    let pad = kernel / 2;
    let mut total = 0;
    let mut a = 0;
    while a < out {
        let b = (a + tile).min(out);
        let lo = (a * stride).saturating_sub(pad);
        let hi = ((b - 1) * stride + kernel).saturating_sub(pad).min(len);
        total += hi.saturating_sub(lo) as u64;
        a = b;
    }
    total
}

#[derive(Debug, Clone, Copy)]
struct Homes {
    input: MemLevel,
    weights: MemLevel,
    output: MemLevel,
}

impl Homes {
    /// L3 copies feeding or draining the L2 staging used by the CDMA.
    fn l3_transfers(&self, input: (u64, u64), weights: (u64, u64), output: (u64, u64)) -> Vec<Transfer> {
        let mut t = Vec::new();
        let mut push = |home: MemLevel, payload, (bytes, count): (u64, u64), inbound: bool| {
            if home == MemLevel::L3 && bytes > 0 {
                let (src, dst) = if inbound { (MemLevel::L3, MemLevel::L2) } else { (MemLevel::L2, MemLevel::L3) };
                t.push(Transfer { src, dst, payload, bytes, count });
            }
        };
        push(self.weights, Payload::Weights, weights, true);
        push(self.input, Payload::Input, input, true);
        push(self.output, Payload::Output, output, false);
        t
    }
}

struct ConvCandidate {
    tile: Tile,
    double_buffered: bool,
    working_set: u64,
    transfers: Vec<Transfer>,
    cycles: u64,
}

/// Cost of one output tile choice, or `None` if it does not fit L1.
fn conv_candidate(
    g: &ConvGeometry,
    input: TensorShape,
    tile: Tile,
    homes: Homes,
    weight_bytes: u64,
    hw: &HardwareModel,
) -> Option<ConvCandidate> {
    let out = g.output_shape(input);
    let (k, s, cin) = (g.kernel, g.stride, g.in_channels as u64);
    let in_tile = cin * ((tile.height - 1) * s + k) as u64 * ((tile.width - 1) * s + k) as u64;
    let w_tile = (tile.channels * g.in_channels * k * k) as u64 + 4 * tile.channels as u64;
    let out_tile = (tile.height * tile.width * tile.channels) as u64;
    let single = in_tile + w_tile + out_tile;
    if single > hw.l1_bytes {
        return None;
    }
    let n_sp = (out.height.div_ceil(tile.height) * out.width.div_ceil(tile.width)) as u64;
    let n_c = out.channels.div_ceil(tile.channels) as u64;
    let double = 2 * (in_tile + out_tile) + if n_c > 1 { 2 * w_tile } else { w_tile };
    let double_buffered = double <= hw.l1_bytes;

    // channel chunks outer; the input stays in L1 when one spatial tile covers it
    let input_passes = if n_sp == 1 { 1 } else { n_c };
    let input_bytes = input_passes
        * cin
        * halo_sum(out.height, tile.height, input.height, k, s)
        * halo_sum(out.width, tile.width, input.width, k, s);
    let output_bytes = out.numel() as u64;
    let l1_weight_bytes = (g.weight_len() + 4 * g.out_channels) as u64;
    let mut transfers = vec![
        Transfer {
            src: MemLevel::L2,
            dst: MemLevel::L1,
            payload: Payload::Weights,
            bytes: l1_weight_bytes,
            count: n_c,
        },
        Transfer {
            src: MemLevel::L2,
            dst: MemLevel::L1,
            payload: Payload::Input,
            bytes: input_bytes,
            count: input_passes * n_sp,
        },
        Transfer {
            src: MemLevel::L1,
            dst: MemLevel::L2,
            payload: Payload::Output,
            bytes: output_bytes,
            count: n_c * n_sp,
        },
    ];
    transfers.extend(homes.l3_transfers(
        (input.numel() as u64, input_passes * n_sp),
        (weight_bytes, n_c),
        (output_bytes, n_c * n_sp),
    ));
    let cycles = layer_cycles(hw, g.macs(input), &transfers, double_buffered).3;
    Some(ConvCandidate {
        tile,
        double_buffered,
        working_set: if double_buffered { double } else { single },
        transfers,
        cycles,
    })
}

/// `(compute, cdma, mdma, total)` cycles of one layer.
fn layer_cycles(hw: &HardwareModel, ops: u64, transfers: &[Transfer], double_buffered: bool) -> (u64, u64, u64, u64) {
    let compute = hw.compute_cycles(ops);
    let (mut cdma, mut mdma) = (0, 0);
    for t in transfers {
        match t.engine() {
            DmaEngine::Cdma => cdma += hw.dma_cycles(t),
            DmaEngine::Mdma => mdma += hw.dma_cycles(t),
        }
    }
    let total = if double_buffered {
        compute.max(cdma + mdma)
    } else {
        compute + cdma + mdma
    };
    (compute, cdma, mdma, total)
}

struct Step {
    node: usize,
    label: String,
    weight_bytes: u64,
    kind: StepKind,
}

enum StepKind {
    Conv { geometry: ConvGeometry, input: TensorShape },
    /// Elementwise layers streamed through L1 in chunks.
    Stream { input_bytes: u64, read_bytes: u64, output_bytes: u64, ops: u64 },
}

fn steps(graph: &NetworkGraph, shapes: &crate::graph::ShapeMap) -> Vec<Step> {
    let params = graph.layer_params(shapes);
    let macs = graph.layer_macs(shapes);
    let mut steps = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate() {
        let label = graph.label(i);
        let input = shapes.of(i.checked_sub(1));
        let out = |i: usize| shapes.outputs[i].map_or(0, |s| s.numel() as u64);
        let stream = |input_bytes: u64, read_bytes: u64, output_bytes: u64, ops: u64| StepKind::Stream {
            input_bytes,
            read_bytes,
            output_bytes,
            ops,
        };
        let (weight_bytes, kind) = match &node.kind {
            LayerKind::Conv { .. } => (
                params[i] as u64,
                StepKind::Conv {
                    geometry: graph.conv_geometry(shapes, i).expect("conv"),
                    input,
                },
            ),
            LayerKind::Se => {
                let n = input.numel() as u64;
                // pool pass then gate pass
                (params[i] as u64, stream(n, 2 * n, out(i), macs[i] + 2 * n))
            }
            LayerKind::MaxPool => (0, stream(input.numel() as u64, input.numel() as u64, out(i), 3 * out(i))),
            LayerKind::Upsample => (0, stream(input.numel() as u64, input.numel() as u64, out(i), out(i))),
            LayerKind::Route(refs) if refs.len() == 1 => continue,
            LayerKind::Route(_) => (0, stream(out(i), out(i), out(i), 0)),
            LayerKind::Detect(refs) => {
                for (k, (g, &r)) in graph.head_geometries(shapes).iter().zip(refs).enumerate() {
                    steps.push(Step {
                        node: i,
                        label: format!("{label}.head{k}"),
                        weight_bytes: param_count(g) as u64,
                        kind: StepKind::Conv {
                            geometry: *g,
                            input: shapes.of(Some(r)),
                        },
                    });
                }
                continue;
            }
        };
        steps.push(Step {
            node: i,
            label,
            weight_bytes,
            kind,
        });
    }
    steps
}

fn plan_conv(step: &Step, g: &ConvGeometry, input: TensorShape, homes: Homes, hw: &HardwareModel) -> Result<LayerPlan> {
    let out = g.output_shape(input);
    let (ths, tws, tcs) = (
        tile_candidates(out.height),
        tile_candidates(out.width),
        tile_candidates(out.channels),
    );
    let mut best: Option<ConvCandidate> = None;
    let better = |c: &ConvCandidate, b: &ConvCandidate| {
        let key = |x: &ConvCandidate| {
            (
                x.cycles,
                std::cmp::Reverse(x.tile.height * x.tile.width * x.tile.channels),
                std::cmp::Reverse(x.tile.channels),
                std::cmp::Reverse(x.tile.height),
                std::cmp::Reverse(x.tile.width),
            )
        };
        key(c) < key(b)
    };
    for &tc in &tcs {
        for &th in &ths {
            let mut any = false;
            for &tw in &tws {
                let tile = Tile {
                    height: th,
                    width: tw,
                    channels: tc,
                };
                // working sets grow with every extent, so the first misfit ends the row
                let Some(c) = conv_candidate(g, input, tile, homes, step.weight_bytes, hw) else {
                    break;
                };
                any = true;
                if best.as_ref().is_none_or(|b| better(&c, b)) {
                    best = Some(c);
                }
            }
            if !any {
                break;
            }
        }
    }
    let best = best.ok_or_else(|| Error::Unplannable {
        layer: step.label.clone(),
        detail: format!(
            "a 1x1x1 output tile needs {} bytes of L1, only {} available",
            (g.in_channels * g.kernel * g.kernel) as u64 * 2 + 5,
            hw.l1_bytes
        ),
    })?;
    let (compute, cdma, mdma, _) = layer_cycles(hw, g.macs(input), &best.transfers, best.double_buffered);
    Ok(LayerPlan {
        node: step.node,
        label: step.label.clone(),
        tile: Some(best.tile),
        input_level: homes.input,
        weight_level: homes.weights,
        output_level: homes.output,
        double_buffered: best.double_buffered,
        working_set_bytes: best.working_set,
        transfers: best.transfers,
        ops: g.macs(input),
        compute_cycles: compute,
        cdma_cycles: cdma,
        mdma_cycles: mdma,
    })
}

fn plan_stream(step: &Step, input_bytes: u64, read_bytes: u64, output_bytes: u64, ops: u64, homes: Homes, hw: &HardwareModel) -> Result<LayerPlan> {
    let w = step.weight_bytes;
    // weights, inputs and outputs each get two chunk buffers
    let chunk = hw.l1_bytes / 6;
    if chunk == 0 {
        return Err(Error::Unplannable {
            layer: step.label.clone(),
            detail: format!("{} bytes of L1 cannot hold streaming buffers", hw.l1_bytes),
        });
    }
    let chunks = |b: u64| b.div_ceil(chunk);
    let mut transfers = Vec::new();
    if w > 0 {
        transfers.push(Transfer {
            src: MemLevel::L2,
            dst: MemLevel::L1,
            payload: Payload::Weights,
            bytes: w,
            count: chunks(w),
        });
    }
    transfers.push(Transfer {
        src: MemLevel::L2,
        dst: MemLevel::L1,
        payload: Payload::Input,
        bytes: read_bytes,
        count: chunks(read_bytes),
    });
    transfers.push(Transfer {
        src: MemLevel::L1,
        dst: MemLevel::L2,
        payload: Payload::Output,
        bytes: output_bytes,
        count: chunks(output_bytes),
    });
    transfers.extend(homes.l3_transfers(
        (input_bytes, chunks(input_bytes)),
        (w, chunks(w)),
        (output_bytes, chunks(output_bytes)),
    ));
    let (compute, cdma, mdma, _) = layer_cycles(hw, ops, &transfers, true);
    Ok(LayerPlan {
        node: step.node,
        label: step.label.clone(),
        tile: None,
        input_level: homes.input,
        weight_level: homes.weights,
        output_level: homes.output,
        double_buffered: true,
        working_set_bytes: 2 * (w.min(chunk) + read_bytes.min(chunk) + output_bytes.min(chunk)),
        transfers,
        ops,
        compute_cycles: compute,
        cdma_cycles: cdma,
        mdma_cycles: mdma,
    })
}

/// Plans every layer of `graph`.
///
/// Weights that do not fit in the L2 room left beside the peak live
/// activations stream from L3 on every inference; which ones stay resident
/// is an exact 0/1 knapsack that minimizes total cycles first and weight
/// bytes streamed from L3 second. A layer whose live activations exceed L2 keeps its input
/// and output in L3. Each convolution takes the cheapest output tile, ties
/// going to the larger tile.
pub fn plan_tiles(graph: &NetworkGraph, hw: &HardwareModel) -> Result<TilePlan> {
    hw.validate()?;
    let shapes = graph.infer_shapes()?;
    let fp = footprint(graph)?;
    let live = live_bytes(graph, &shapes);
    let budget = hw.l2_bytes.saturating_sub(fp.peak_activation_bytes);
    let plan_step = |step: &Step, weights: MemLevel| {
        let act = if live[step.node] > hw.l2_bytes { MemLevel::L3 } else { MemLevel::L2 };
        let homes = Homes {
            input: act,
            weights,
            output: act,
        };
        match step.kind {
            StepKind::Conv { geometry, input } => plan_conv(step, &geometry, input, homes, hw),
            StepKind::Stream {
                input_bytes,
                read_bytes,
                output_bytes,
                ops,
            } => plan_stream(step, input_bytes, read_bytes, output_bytes, ops, homes, hw),
        }
    };
    let steps = steps(graph, &shapes);
    let mut options = Vec::with_capacity(steps.len());
    for step in &steps {
        let resident = plan_step(step, MemLevel::L2)?;
        let streamed = if step.weight_bytes > 0 {
            Some(plan_step(step, MemLevel::L3)?)
        } else {
            None
        };
        options.push((resident, streamed));
    }
    let cycles = |l: &LayerPlan| layer_cycles(hw, l.ops, &l.transfers, l.double_buffered).3;
    // cycles saved, then bytes saved, packed into one value
    let scale = steps.iter().map(|s| s.weight_bytes).sum::<u64>() + 1;
    let items: Vec<(u64, u64)> = steps
        .iter()
        .zip(&options)
        .map(|(step, (r, s))| {
            let saved = s.as_ref().map_or(0, |s| cycles(s) - cycles(r));
            (step.weight_bytes, saved * scale + step.weight_bytes)
        })
        .collect();
    let keep = choose_resident(&items, budget);

    let mut layers = Vec::with_capacity(steps.len());
    let mut resident = 0;
    let mut peak_l2_act = 0;
    for ((step, (r, s)), keep) in steps.iter().zip(options).zip(keep) {
        if live[step.node] <= hw.l2_bytes {
            peak_l2_act = peak_l2_act.max(live[step.node]);
        }
        match s {
            Some(s) if !keep => layers.push(s),
            _ => {
                resident += step.weight_bytes;
                layers.push(r);
            }
        }
    }
    Ok(TilePlan {
        peak_l1_bytes: layers.iter().map(|l| l.working_set_bytes).max().unwrap_or(0),
        peak_l2_bytes: resident + peak_l2_act,
        layers,
        weight_bytes: fp.weight_bytes,
        resident_weight_bytes: resident,
        peak_activation_bytes: fp.peak_activation_bytes,
    })
}

/// Picks which `(bytes, saving)` items to keep within `budget` bytes so the
/// total saving is maximal. Zero-byte items are always kept; on equal savings
/// the earlier layers win.
fn choose_resident(items: &[(u64, u64)], budget: u64) -> Vec<bool> {
    let total: u64 = items.iter().map(|i| i.0).sum();
    if total <= budget {
        return vec![true; items.len()];
    }
    let cap = budget as usize;
    let mut best = vec![0u64; cap + 1];
    // taken[i][b]: item i improves the optimum at capacity b
    let mut taken = vec![Vec::new(); items.len()];
    for (i, &(w, gain)) in items.iter().enumerate().rev() {
        let w = w as usize;
        let mut bits = vec![0u64; (cap + 1).div_ceil(64)];
        if w > 0 && w <= cap {
            for b in (w..=cap).rev() {
                let with = best[b - w] + gain;
                if with >= best[b] && gain > 0 {
                    best[b] = with;
                    bits[b / 64] |= 1 << (b % 64);
                }
            }
        }
        taken[i] = bits;
    }
    let mut b = cap;
    items
        .iter()
        .zip(&taken)
        .map(|(&(w, _), bits)| {
            if w == 0 {
                return true;
            }
            let take = bits[b / 64] >> (b % 64) & 1 == 1;
            if take {
                b -= w as usize;
            }
            take
        })
        .collect()
}

/// Most steps [`plan_exhaustive`] accepts.
pub const EXHAUSTIVE_MAX_STEPS: usize = 12;

/// Brute-force reference for [`plan_tiles`] on small convolution-only graphs:
/// tries every integer output tile of every layer, both buffering modes and
/// every subset of layers whose weights stay in L2. Returns the least
/// `(cycles, weight bytes streamed from L3)`, or `None` when some layer has
/// no tile that fits L1.
pub fn plan_exhaustive(graph: &NetworkGraph, hw: &HardwareModel) -> Result<Option<(u64, u64)>> {
    hw.validate()?;
    let shapes = graph.infer_shapes()?;
    let live = live_bytes(graph, &shapes);
    let budget = hw.l2_bytes.saturating_sub(footprint(graph)?.peak_activation_bytes);
    let steps = steps(graph, &shapes);
    if steps.len() > EXHAUSTIVE_MAX_STEPS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search takes at most {EXHAUSTIVE_MAX_STEPS} steps, graph has {}",
            steps.len()
        )));
    }
    let best_tile = |step: &Step, weights: MemLevel| -> Result<Option<u64>> {
        let StepKind::Conv { geometry: g, input } = step.kind else {
            return Err(Error::InvalidArgument(format!("{} is not a convolution", step.label)));
        };
        let act = if live[step.node] > hw.l2_bytes { MemLevel::L3 } else { MemLevel::L2 };
        let homes = Homes {
            input: act,
            weights,
            output: act,
        };
        let out = g.output_shape(input);
        let mut best = None::<u64>;
        for tc in 1..=out.channels {
            for th in 1..=out.height {
                for tw in 1..=out.width {
                    let tile = Tile {
                        height: th,
                        width: tw,
                        channels: tc,
                    };
                    if let Some(c) = conv_candidate(&g, input, tile, homes, step.weight_bytes, hw) {
                        let single = layer_cycles(hw, g.macs(input), &c.transfers, false).3;
                        let v = c.cycles.min(single);
                        best = Some(best.map_or(v, |b| b.min(v)));
                    }
                }
            }
        }
        Ok(best)
    };
    let mut costs = Vec::with_capacity(steps.len());
    for s in &steps {
        costs.push((best_tile(s, MemLevel::L2)?, best_tile(s, MemLevel::L3)?));
    }
    let all: u64 = steps.iter().map(|s| s.weight_bytes).sum();
    let mut best = None::<(u64, u64)>;
    for mask in 0u32..1 << steps.len() {
        let kept = |i: usize| mask >> i & 1 == 1;
        let bytes: u64 = (0..steps.len()).filter(|&i| kept(i)).map(|i| steps[i].weight_bytes).sum();
        if bytes > budget {
            continue;
        }
        let total: Option<u64> = costs
            .iter()
            .enumerate()
            .map(|(i, &(r, s))| if kept(i) { r } else { s })
            .sum();
        if let Some(t) = total {
            let key = (t, all - bytes);
            best = Some(best.map_or(key, |b| b.min(key)));
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub cycles: u64,
    pub ms: f64,
}

impl Latency {
    pub fn inferences_per_second(&self) -> f64 {
        1000.0 / self.ms
    }
}

/// Per layer: `compute = ceil(ops / (cores * eff))`, DMA as in the module
/// docs; double-buffered layers take `max(compute, dma)`, others the sum.
pub fn layer_latencies(plan: &TilePlan, hw: &HardwareModel) -> Vec<(u64, u64, u64, u64)> {
    plan.layers
        .iter()
        .map(|l| layer_cycles(hw, l.ops, &l.transfers, l.double_buffered))
        .collect()
}

pub fn predict_latency(plan: &TilePlan, hw: &HardwareModel) -> Latency {
    let cycles = layer_latencies(plan, hw).iter().map(|c| c.3).sum();
    Latency {
        cycles,
        ms: cycles as f64 / hw.cluster_hz * 1000.0,
    }
}

/// Plans and predicts in one go.
pub fn plan_latency(graph: &NetworkGraph, hw: &HardwareModel) -> Result<Latency> {
    Ok(predict_latency(&plan_tiles(graph, hw)?, hw))
}

/// Finds the effective MAC rate at which the planned graph runs in
/// `measured_ms`, re-planning at every probe. Bisects on the log of the rate.
pub fn calibrate(hw: &HardwareModel, graph: &NetworkGraph, measured_ms: f64) -> Result<HardwareModel> {
    if !(measured_ms.is_finite() && measured_ms > 0.0) {
        return Err(Error::InvalidArgument(format!("measured latency must be positive, got {measured_ms}")));
    }
    let at = |eff: f64| -> Result<f64> {
        let h = HardwareModel {
            effective_macs_per_core_cycle: eff,
            ..*hw
        };
        Ok(plan_latency(graph, &h)?.ms)
    };
    let rel = |ms: f64| (ms - measured_ms).abs() / measured_ms;
    if rel(at(hw.effective_macs_per_core_cycle)?) <= 1e-9 {
        return Ok(*hw);
    }
    let (mut lo, mut hi) = (1e-4f64.ln(), 1e4f64.ln());
    let (slow, fast) = (at(lo.exp())?, at(hi.exp())?);
    if !(fast <= measured_ms && measured_ms <= slow) {
        return Err(Error::CalibrationUnreachable(format!(
            "{measured_ms} ms is outside the reachable range [{fast:.4}, {slow:.4}] ms"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let ms = at(mid.exp())?;
        if rel(ms) <= 1e-6 {
            lo = mid;
            hi = mid;
            break;
        }
        if ms > measured_ms {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let eff = (0.5 * (lo + hi)).exp();
    let out = HardwareModel {
        effective_macs_per_core_cycle: eff,
        ..*hw
    };
    let got = at(eff)?;
    if rel(got) > 0.01 {
        return Err(Error::CalibrationUnreachable(format!(
            "closest prediction {got:.4} ms misses {measured_ms} ms by more than 1%"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    Core(u32),
    Cdma,
    Mdma,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Core(i) => write!(f, "core{i}"),
            Unit::Cdma => f.write_str("CDMA"),
            Unit::Mdma => f.write_str("MDMA"),
        }
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CDMA" => Ok(Unit::Cdma),
            "MDMA" => Ok(Unit::Mdma),
            _ => s
                .strip_prefix("core")
                .and_then(|n| n.parse().ok())
                .map(Unit::Core)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown unit `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub unit: Unit,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub total_cycles: u64,
    /// `(unit, busy cycles / total cycles)`, cores first.
    pub busy_fraction: Vec<(String, f64)>,
    /// Share of the total runtime during which the MDMA is busy.
    pub mdma_share: f64,
}

impl TraceSummary {
    pub fn busy(&self, unit: Unit) -> f64 {
        let name = unit.to_string();
        self.busy_fraction
            .iter()
            .find(|(u, _)| *u == name)
            .map_or(0.0, |(_, f)| *f)
    }
}

/// Replays the plan layer by layer: MDMA first, then CDMA; cores run
/// alongside the DMA when double-buffered, after it otherwise.
pub fn emit_trace(plan: &TilePlan, hw: &HardwareModel) -> (Vec<TraceEvent>, TraceSummary) {
    let mut events = Vec::new();
    let mut t = 0;
    let mut push = |start: u64, len: u64, unit: Unit, label: String| {
        if len > 0 {
            events.push(TraceEvent {
                start_cycle: start,
                end_cycle: start + len,
                unit,
                label,
            });
        }
    };
    for (l, &(compute, cdma, mdma, total)) in plan.layers.iter().zip(&layer_latencies(plan, hw)) {
        push(t, mdma, Unit::Mdma, format!("{} L3<->L2", l.label));
        push(t + mdma, cdma, Unit::Cdma, format!("{} L2<->L1", l.label));
        let start = if l.double_buffered { t } else { t + cdma + mdma };
        for core in 0..hw.cluster_cores {
            push(start, compute, Unit::Core(core), format!("{} compute", l.label));
        }
        t += total;
    }
    events.sort_by(|a, b| (a.start_cycle, a.unit).cmp(&(b.start_cycle, b.unit)));

    let units: Vec<Unit> = (0..hw.cluster_cores)
        .map(Unit::Core)
        .chain([Unit::Cdma, Unit::Mdma])
        .collect();
    let frac = |u: Unit| {
        let busy: u64 = events.iter().filter(|e| e.unit == u).map(|e| e.end_cycle - e.start_cycle).sum();
        if t == 0 {
            0.0
        } else {
            busy as f64 / t as f64
        }
    };
    let summary = TraceSummary {
        total_cycles: t,
        busy_fraction: units.iter().map(|&u| (u.to_string(), frac(u))).collect(),
        mdma_share: frac(Unit::Mdma),
    };
    (events, summary)
}

pub const TRACE_HEADER: &str = "start_cycle,end_cycle,unit,label";

pub fn write_trace_csv<W: Write>(mut out: W, events: &[TraceEvent]) -> std::io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for e in events {
        writeln!(out, "{},{},{},{}", e.start_cycle, e.end_cycle, e.unit, e.label)?;
    }
    Ok(())
}

pub fn read_trace_csv(text: &str) -> Result<Vec<TraceEvent>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::InvalidArgument("trace is missing its header".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::InvalidArgument(format!("trace line {}: `{line}`", n + 2));
            let mut f = line.splitn(4, ',');
            let mut field = || f.next().ok_or_else(bad);
            let start_cycle = field()?.parse().map_err(|_| bad())?;
            let end_cycle = field()?.parse().map_err(|_| bad())?;
            let unit = field()?.parse()?;
            let label = field()?.to_string();
            Ok(TraceEvent {
                start_cycle,
                end_cycle,
                unit,
                label,
            })
        })
        .collect()
}

/// True when no two events on the same unit overlap and every event has
/// positive length.
pub fn events_disjoint(events: &[TraceEvent]) -> bool {
    let mut by_unit: std::collections::BTreeMap<Unit, Vec<(u64, u64)>> = Default::default();
    for e in events {
        if e.end_cycle <= e.start_cycle {
            return false;
        }
        by_unit.entry(e.unit).or_default().push((e.start_cycle, e.end_cycle));
    }
    by_unit.values_mut().all(|v| {
        v.sort_unstable();
        v.windows(2).all(|w| w[0].1 <= w[1].0)
    })
}

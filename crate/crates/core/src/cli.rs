//! The `seyolo` command surface and the benchmark arithmetic behind
//! `bench-report`.
//!
//! [`run`] parses arguments, executes one subcommand and returns the exit
//! code: 0 ok, 2 usage, 3 unreadable or malformed input, 4 model or weight
//! archive problem, 5 planning failure.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::detect::{detect_objects, Detection, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_IOU};
use crate::evalkit::{
    class_color, generate_shapes_dataset, load_dataset, map_eval, read_detections, EvalReport, ImageResult,
    RgbImage, MANIFEST,
};
use crate::graph::{
    build_squeezed_edge_yolo, layer_errors, quantize_model, scale_model, Model, ModelMode, NeckWidthSource, NetConfig,
    NetworkGraph,
};
use crate::kernels::Exec;
use crate::memplan::{
    calibrate, emit_trace, footprint, plan_tiles, predict_latency, write_trace_csv, Footprint, HardwareModel, MemLevel,
    Unit,
};
use crate::modelio::{calibrate_objectness, init_random_weights, load_weights, load_weights_as, save_weights};
use crate::qtensor::FloatTensor;
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_MODEL: i32 = 4;
pub const EXIT_PLAN: i32 = 5;

/// Caps the rayon worker count when set.
pub const THREADS_ENV: &str = "SEYOLO_THREADS";

/// Reference model size for the "times smaller" ratio.
pub const YOLOV5S_PARAMS: f64 = 7.3e6;

/// Measured cells of one benchmark row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct BenchInputs {
    pub latency_ms: f64,
    pub cpu_power_mw: f64,
    pub gpu_power_mw: f64,
    /// Work per inference in GOP; defaults to the op count of the graph.
    pub gop_per_inference: Option<f64>,
    /// Measured throughput in GOPS; takes precedence over `gop_per_inference`.
    pub performance_gops: Option<f64>,
    /// A published efficiency to check the arithmetic against.
    pub published_gops_per_j: Option<f64>,
}

impl BenchInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.latency_ms) {
            return Err(Error::InvalidArgument(format!("latency must be positive, got {}", self.latency_ms)));
        }
        if !(self.cpu_power_mw >= 0.0 && self.gpu_power_mw >= 0.0)
            || !(self.cpu_power_mw.is_finite() && self.gpu_power_mw.is_finite())
        {
            return Err(Error::InvalidArgument("powers must be finite and non-negative".into()));
        }
        for v in [self.gop_per_inference, self.performance_gops, self.published_gops_per_j]
            .into_iter()
            .flatten()
        {
            if !positive(v) {
                return Err(Error::InvalidArgument(format!("expected a positive value, got {v}")));
            }
        }
        Ok(())
    }
}

/// Parses `latency_ms=231,cpu_mw=777,gpu_mw=3846,gops=198.2`. Keys: `latency_ms`,
/// `cpu_mw`, `gpu_mw`, `gop`, `gops`, `published_gops_per_j`.
impl FromStr for BenchInputs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut b = BenchInputs::default();
        let mut seen = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got `{part}`")))?;
            let key = key.trim();
            let v: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("{key}: `{}` is not a number", value.trim())))?;
            if seen.contains(&key) {
                return Err(Error::InvalidArgument(format!("duplicate key {key}")));
            }
            seen.push(key);
            match key {
                "latency_ms" => b.latency_ms = v,
                "cpu_mw" => b.cpu_power_mw = v,
                "gpu_mw" => b.gpu_power_mw = v,
                "gop" => b.gop_per_inference = Some(v),
                "gops" => b.performance_gops = Some(v),
                "published_gops_per_j" => b.published_gops_per_j = Some(v),
                _ => return Err(Error::InvalidArgument(format!("unknown key {key}"))),
            }
        }
        if !seen.contains(&"latency_ms") {
            return Err(Error::InvalidArgument("latency_ms is required".into()));
        }
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchReport {
    pub throughput: f64,
    pub energy_per_inference_mj: f64,
    pub performance_gops: f64,
    pub energy_efficiency_gops_per_j: f64,
    pub published_gops_per_j: Option<f64>,
    /// Whether the published efficiency is within 1% of the computed one.
    pub published_consistent: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchComparison {
    /// Candidate throughput over baseline throughput.
    pub speedup: f64,
    /// Energy per inference saved by the candidate, in percent of the baseline.
    pub energy_improvement_pct: f64,
}

pub fn bench_report(inputs: &BenchInputs, default_gop: f64) -> Result<BenchReport> {
    inputs.validate()?;
    let throughput = 1000.0 / inputs.latency_ms;
    let energy_mj = (inputs.cpu_power_mw + inputs.gpu_power_mw) * inputs.latency_ms / 1000.0;
    let gops = inputs
        .performance_gops
        .unwrap_or_else(|| inputs.gop_per_inference.unwrap_or(default_gop) * throughput);
    let efficiency = gops / (energy_mj / 1000.0);
    Ok(BenchReport {
        throughput,
        energy_per_inference_mj: energy_mj,
        performance_gops: gops,
        energy_efficiency_gops_per_j: efficiency,
        published_gops_per_j: inputs.published_gops_per_j,
        published_consistent: inputs
            .published_gops_per_j
            .map(|p| (p - efficiency).abs() <= 0.01 * p),
    })
}

pub fn compare(baseline: &BenchReport, candidate: &BenchReport) -> BenchComparison {
    BenchComparison {
        speedup: candidate.throughput / baseline.throughput,
        energy_improvement_pct: 100.0 * (1.0 - candidate.energy_per_inference_mj / baseline.energy_per_inference_mj),
    }
}

/// Detections in coordinates normalized to the image, which is resized to
/// the network input with nearest-neighbour sampling first.
pub fn detect_in_image(model: &Model, image: &RgbImage, conf: f32, nms_iou: f32) -> Result<Vec<Detection>> {
    let s = model.graph().config().input_shape;
    let input = if (image.width(), image.height()) == (s.width, s.height) {
        image.to_tensor()
    } else {
        image.resize_nearest(s.width, s.height).to_tensor()
    };
    detect_objects(model.graph(), &model.infer(&input, Exec::Sequential)?, conf, nms_iou)
}

/// One line of `infer` output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct DetectionRecord {
    pub class: usize,
    pub score: f32,
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            class: d.class_id,
            score: d.score,
            cx: d.bbox.cx,
            cy: d.bbox.cy,
            w: d.bbox.w,
            h: d.bbox.h,
        }
    }
}

#[derive(Parser)]
#[command(name = "seyolo", version, about = "Squeezed Edge YOLO: int8 inference, tiling planner, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layer table, parameter and op counts, memory footprint.
    ModelInfo(ModelInfoArgs),
    /// Writes seeded random float weights.
    InitWeights(InitArgs),
    /// Runs the detector on one PPM image.
    Infer(InferArgs),
    /// Per-class AP and mAP over a labelled dataset.
    Eval(EvalArgs),
    /// Tiles the network onto a hardware model and predicts latency.
    Plan(PlanArgs),
    /// Derives throughput, energy and efficiency from measured cells.
    BenchReport(BenchArgs),
    /// Calibrates activation ranges and writes an int8 archive.
    Quantize(QuantizeArgs),
    /// Renders a synthetic shapes dataset.
    SynthData(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NeckWidths {
    Filters,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Float,
    Int8,
}

impl From<Mode> for ModelMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Float => ModelMode::Float,
            Mode::Int8 => ModelMode::Int8,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct NetArgs {
    /// Number of object classes.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Square input side in pixels, a multiple of 16.
    #[arg(long, default_value_t = 128)]
    input_size: usize,
    /// Which table column sets the neck widths.
    #[arg(long, value_enum, default_value_t = NeckWidths::Filters)]
    neck_widths: NeckWidths,
    /// Parameter scale factor (>= 1); widens every convolution.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

impl NetArgs {
    fn base_graph(&self) -> Result<NetworkGraph> {
        let mut config = NetConfig::default()
            .with_classes(self.classes)
            .with_input_size(self.input_size);
        config.neck_width_source = match self.neck_widths {
            NeckWidths::Filters => NeckWidthSource::FiltersColumn,
            NeckWidths::Output => NeckWidthSource::OutputColumn,
        };
        build_squeezed_edge_yolo(config)
    }

    fn graph(&self) -> Result<NetworkGraph> {
        let base = self.base_graph()?;
        if self.scale == 1.0 {
            Ok(base)
        } else {
            scale_model(&base, self.scale)
        }
    }
}

#[derive(Args, Debug)]
struct ModelInfoArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset whose mean object count the float model's mean detection
    /// count is tuned to, through a shared objectness bias.
    #[arg(long, value_name = "DIR")]
    calibrate_objectness: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms: f32,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Execution mode; defaults to whatever the archive holds.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms: f32,
    /// Writes a copy of the image with the boxes drawn in.
    #[arg(long, value_name = "PPM")]
    annotate: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Dataset directory holding a manifest.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "detections", conflicts_with = "detections")]
    weights: Option<PathBuf>,
    /// Precomputed detections, one `<image stem>.txt` per image.
    #[arg(long, value_name = "DIR")]
    detections: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, default_value_t = 0.5)]
    iou: f32,
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    conf: f32,
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    nms: f32,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    net: NetArgs,
    /// key = value hardware description; defaults apply to missing keys.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Writes the occupancy trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Base-model latency the MAC rate is calibrated to.
    #[arg(long, default_value_t = 130.0)]
    calibrate_ms: f64,
    #[arg(long)]
    no_calibrate: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    net: NetArgs,
    /// e.g. `latency_ms=231,cpu_mw=777,gpu_mw=3846,gops=198.2`
    #[arg(long)]
    baseline: String,
    #[arg(long)]
    candidate: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Float weight archive.
    #[arg(long)]
    weights: PathBuf,
    /// Calibration images: a dataset with a manifest, or a directory of PPMs.
    #[arg(long, value_name = "DIR")]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long)]
    json: bool,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl Failure {
    fn new(code: i32, message: impl fmt::Display) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    fn usage(message: impl fmt::Display) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    fn input(e: Error) -> Self {
        Self::new(EXIT_INPUT, e)
    }

    fn model(e: Error) -> Self {
        Self::new(EXIT_MODEL, e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::InvalidConfig(_) => EXIT_USAGE,
            Error::Malformed { .. } | Error::Io { .. } | Error::DegenerateRange(_) | Error::HardwareConfig { .. } => {
                EXIT_INPUT
            }
            Error::Unplannable { .. } | Error::CalibrationUnreachable(_) => EXIT_PLAN,
            _ => EXIT_MODEL,
        };
        Self::new(code, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_INPUT, e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Runs one invocation. `args` includes the program name.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    // commands write to a buffer so they can run inside a sized pool
    let mut buf = Vec::new();
    let result = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::usage(format!("{THREADS_ENV}: {e}")))
                .and_then(|pool| pool.install(|| dispatch(cli.command, &mut buf))),
            _ => Err(Failure::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => dispatch(cli.command, &mut buf),
    };
    let result = result.and_then(|()| out.write_all(&buf).map_err(Failure::from));
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {f}");
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CmdResult {
    match command {
        Command::ModelInfo(a) => cmd_model_info(a, out),
        Command::InitWeights(a) => cmd_init_weights(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Plan(a) => cmd_plan(a, out),
        Command::BenchReport(a) => cmd_bench_report(a, out),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::SynthData(a) => cmd_synth_data(a, out),
    }
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> CmdResult {
    serde_json::to_writer_pretty(&mut *out, value).map_err(|e| Failure::new(EXIT_INPUT, e))?;
    writeln!(out)?;
    Ok(())
}

fn check_thresholds(conf: f32, nms: f32) -> CmdResult {
    if !(0.0..=1.0).contains(&conf) {
        return Err(Failure::usage(format!("--conf must lie in [0, 1], got {conf}")));
    }
    if !(nms > 0.0 && nms <= 1.0) {
        return Err(Failure::usage(format!("--nms must lie in (0, 1], got {nms}")));
    }
    Ok(())
}

fn load_model(path: &Path, graph: &NetworkGraph, mode: Option<Mode>) -> std::result::Result<Model, Failure> {
    match mode {
        Some(m) => load_weights_as(path, graph, m.into()),
        None => load_weights(path, graph),
    }
    .map_err(Failure::model)
}

#[derive(Serialize)]
struct LayerRow {
    label: String,
    kind: &'static str,
    output: Option<[usize; 3]>,
    params: usize,
    ops: u64,
}

#[derive(Serialize)]
struct ModelInfo {
    layers: Vec<LayerRow>,
    params: usize,
    size_mbit: f64,
    gop: f64,
    footprint: Footprint,
    yolov5s_ratio: f64,
}

fn cmd_model_info(a: ModelInfoArgs, out: &mut dyn Write) -> CmdResult {
    let g = a.net.graph()?;
    let shapes = g.infer_shapes()?;
    let (params, ops) = (g.layer_params(&shapes), g.layer_ops(&shapes));
    let mut layers: Vec<LayerRow> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| LayerRow {
            label: g.label(i),
            kind: n.kind.name(),
            output: shapes.outputs[i].map(|s| [s.channels, s.height, s.width]),
            params: params[i],
            ops: ops[i],
        })
        .collect();
    if let Some((i, _)) = g.detect_node() {
        let heads = shapes.heads.iter().map(|s| format!("{s}")).collect::<Vec<_>>().join(" + ");
        layers[i].output = None;
        layers[i].label = format!("{} -> {heads}", layers[i].label);
    }
    let total = g.param_count()?;
    let info = ModelInfo {
        layers,
        params: total,
        size_mbit: total as f64 * 8.0 / 1e6,
        gop: g.count_ops()? as f64 / 1e9,
        footprint: footprint(&g)?,
        yolov5s_ratio: YOLOV5S_PARAMS / total as f64,
    };
    if a.json {
        return print_json(out, &info);
    }
    writeln!(out, "{:<28} {:<9} {:>14} {:>9} {:>12}", "layer", "kind", "output", "params", "ops")?;
    for l in &info.layers {
        let shape = l.output.map_or(String::new(), |[c, h, w]| format!("{c}x{h}x{w}"));
        writeln!(out, "{:<28} {:<9} {:>14} {:>9} {:>12}", l.label, l.kind, shape, l.params, l.ops)?;
    }
    writeln!(out, "parameters: {} ({:.2} Mbit at 8 bits)", info.params, info.size_mbit)?;
    writeln!(out, "operations: {:.4} GOP per inference", info.gop)?;
    writeln!(
        out,
        "footprint: {} B weights, {} B input, {} B peak live activations",
        info.footprint.weight_bytes, info.footprint.input_bytes, info.footprint.peak_activation_bytes
    )?;
    writeln!(out, "YOLOv5s (7.3M) is {:.2}x larger", info.yolov5s_ratio)?;
    Ok(())
}

fn dataset_tensors(dir: &Path, graph: &NetworkGraph) -> std::result::Result<(Vec<FloatTensor>, usize), Failure> {
    let data = load_dataset(dir).map_err(Failure::input)?;
    let s = graph.config().input_shape;
    let objects = data.iter().map(|d| d.ground_truths.len()).sum();
    let images = data
        .par_iter()
        .map(|d| Ok(RgbImage::read(&d.image_path)?.resize_nearest(s.width, s.height).to_tensor()))
        .collect::<Result<Vec<_>>>()
        .map_err(Failure::input)?;
    Ok((images, objects))
}

#[derive(Serialize)]
struct InitSummary {
    out: PathBuf,
    seed: u64,
    params: usize,
    objectness_bias: Option<f32>,
}

fn cmd_init_weights(a: InitArgs, out: &mut dyn Write) -> CmdResult {
    check_thresholds(a.conf, a.nms)?;
    let g = a.net.graph()?;
    let mut model = init_random_weights(&g, a.seed);
    let bias = match &a.calibrate_objectness {
        Some(dir) => {
            let (images, objects) = dataset_tensors(dir, &g)?;
            if images.is_empty() {
                return Err(Failure::new(EXIT_INPUT, format!("{}: dataset is empty", dir.display())));
            }
            let target = objects as f64 / images.len() as f64;
            Some(calibrate_objectness(&mut model, &images, target, a.conf, a.nms)?)
        }
        None => None,
    };
    save_weights(&Model::Float(model), &a.out).map_err(Failure::input)?;
    let summary = InitSummary {
        out: a.out,
        seed: a.seed,
        params: g.param_count()?,
        objectness_bias: bias,
    };
    if a.json {
        return print_json(out, &summary);
    }
    write!(out, "wrote {} float parameters to {} (seed {})", summary.params, summary.out.display(), a.seed)?;
    match bias {
        Some(b) => writeln!(out, ", objectness bias {b:.4}")?,
        None => writeln!(out)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct InferOutput<'a> {
    image: &'a Path,
    mode: ModelMode,
    detections: Vec<DetectionRecord>,
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> CmdResult {
    check_thresholds(a.conf, a.nms)?;
    let g = a.net.graph()?;
    let image = RgbImage::read(&a.image).map_err(Failure::input)?;
    let model = load_model(&a.weights, &g, a.mode)?;
    let dets = detect_in_image(&model, &image, a.conf, a.nms)?;
    if let Some(path) = &a.annotate {
        let mut canvas = image.clone();
        for d in &dets {
            canvas.draw_box(&d.bbox, class_color(d.class_id));
        }
        canvas.write(path).map_err(Failure::input)?;
    }
    let records: Vec<DetectionRecord> = dets.iter().map(DetectionRecord::from).collect();
    if a.json {
        return print_json(
            out,
            &InferOutput {
                image: &a.image,
                mode: model.mode(),
                detections: records,
            },
        );
    }
    for r in &records {
        serde_json::to_writer(&mut *out, r).map_err(|e| Failure::new(EXIT_INPUT, e))?;
        writeln!(out)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    check_thresholds(a.conf, a.nms)?;
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Failure::usage(format!("--iou must lie in (0, 1], got {}", a.iou)));
    }
    let g = a.net.graph()?;
    let data = load_dataset(&a.data).map_err(Failure::input)?;
    let results: Vec<ImageResult> = match (&a.weights, &a.detections) {
        (Some(w), _) => {
            let model = load_model(w, &g, a.mode)?;
            data.par_iter()
                .map(|d| {
                    let image = RgbImage::read(&d.image_path).map_err(Failure::input)?;
                    Ok(ImageResult {
                        detections: detect_in_image(&model, &image, a.conf, a.nms)?,
                        ground_truths: d.ground_truths.clone(),
                    })
                })
                .collect::<std::result::Result<_, Failure>>()?
        }
        (None, Some(dir)) => data
            .iter()
            .map(|d| {
                let stem = d.image_path.file_stem().unwrap_or_default();
                let path = dir.join(stem).with_extension("txt");
                Ok(ImageResult {
                    detections: read_detections(&path).map_err(Failure::input)?,
                    ground_truths: d.ground_truths.clone(),
                })
            })
            .collect::<std::result::Result<_, Failure>>()?,
        (None, None) => return Err(Failure::usage("one of --weights or --detections is required")),
    };
    let report: EvalReport = map_eval(&results, g.config().num_classes, a.iou).map_err(Failure::input)?;
    if a.json {
        return print_json(out, &report);
    }
    for c in &report.classes {
        writeln!(
            out,
            "class {}: AP {:.4}  ground truths {}  tp {}  fp {}  fn {}",
            c.class_id, c.ap, c.ground_truths, c.tp, c.fp, c.fn_
        )?;
    }
    writeln!(out, "mAP@{:.2}: {:.4} over {} images", report.iou_threshold, report.map, results.len())?;
    Ok(())
}

#[derive(Serialize)]
struct PlanLayerRow {
    label: String,
    tile: Option<[usize; 3]>,
    weights: MemLevel,
    activations: MemLevel,
    double_buffered: bool,
    working_set_bytes: u64,
    cycles: u64,
}

#[derive(Serialize)]
struct PlanSummary {
    scale: f64,
    params: usize,
    hardware: HardwareModel,
    calibrated_to_ms: Option<f64>,
    peak_l1_bytes: u64,
    peak_l2_bytes: u64,
    l3_traffic_bytes: u64,
    l2_traffic_bytes: u64,
    cycles: u64,
    ms: f64,
    inferences_per_second: f64,
    core0_busy: f64,
    cdma_busy: f64,
    mdma_busy: f64,
    layers: Vec<PlanLayerRow>,
}

fn cmd_plan(a: PlanArgs, out: &mut dyn Write) -> CmdResult {
    let mut hw = match &a.hw {
        Some(p) => HardwareModel::from_file(p)?,
        None => HardwareModel::default(),
    };
    let graph = a.net.graph()?;
    let calibrated_to = if a.no_calibrate {
        None
    } else {
        hw = calibrate(&hw, &a.net.base_graph()?, a.calibrate_ms)?;
        Some(a.calibrate_ms)
    };
    let plan = plan_tiles(&graph, &hw)?;
    let lat = predict_latency(&plan, &hw);
    let (events, trace) = emit_trace(&plan, &hw);
    if let Some(path) = &a.trace {
        let file = fs::File::create(path).map_err(|e| Failure::input(Error::io(path, e)))?;
        write_trace_csv(std::io::BufWriter::new(file), &events).map_err(|e| Failure::input(Error::io(path, e)))?;
    }
    let cycles = crate::memplan::layer_latencies(&plan, &hw);
    let summary = PlanSummary {
        scale: a.net.scale,
        params: graph.param_count()?,
        hardware: hw,
        calibrated_to_ms: calibrated_to,
        peak_l1_bytes: plan.peak_l1_bytes,
        peak_l2_bytes: plan.peak_l2_bytes,
        l3_traffic_bytes: plan.l3_traffic_bytes(),
        l2_traffic_bytes: plan.l2_traffic_bytes(),
        cycles: lat.cycles,
        ms: lat.ms,
        inferences_per_second: lat.inferences_per_second(),
        core0_busy: trace.busy(Unit::Core(0)),
        cdma_busy: trace.busy(Unit::Cdma),
        mdma_busy: trace.busy(Unit::Mdma),
        layers: plan
            .layers
            .iter()
            .zip(cycles)
            .map(|(l, c)| PlanLayerRow {
                label: l.label.clone(),
                tile: l.tile.map(|t| [t.channels, t.height, t.width]),
                weights: l.weight_level,
                activations: l.input_level,
                double_buffered: l.double_buffered,
                working_set_bytes: l.working_set_bytes,
                cycles: c.3,
            })
            .collect(),
    };
    if a.json {
        return print_json(out, &summary);
    }
    writeln!(out, "{:<16} {:>12} {:>7} {:>5} {:>4} {:>9} {:>11}", "layer", "tile", "weights", "acts", "dbuf", "L1 bytes", "cycles")?;
    for l in &summary.layers {
        let tile = l.tile.map_or("stream".to_string(), |[c, h, w]| format!("{c}x{h}x{w}"));
        writeln!(
            out,
            "{:<16} {:>12} {:>7} {:>5} {:>4} {:>9} {:>11}",
            l.label,
            tile,
            format!("{:?}", l.weights),
            format!("{:?}", l.activations),
            if l.double_buffered { "yes" } else { "no" },
            l.working_set_bytes,
            l.cycles
        )?;
    }
    match calibrated_to {
        Some(ms) => writeln!(
            out,
            "MAC rate {:.4} per core-cycle (base model calibrated to {ms} ms)",
            hw.effective_macs_per_core_cycle
        )?,
        None => writeln!(out, "MAC rate {:.4} per core-cycle", hw.effective_macs_per_core_cycle)?,
    }
    writeln!(out, "scale {}x: {} parameters", summary.scale, summary.params)?;
    writeln!(out, "peak L1: {} of {} B", summary.peak_l1_bytes, hw.l1_bytes)?;
    writeln!(out, "peak L2: {} of {} B", summary.peak_l2_bytes, hw.l2_bytes)?;
    writeln!(out, "L3 traffic: {} B per inference", summary.l3_traffic_bytes)?;
    writeln!(out, "L2->L1 traffic: {} B per inference", summary.l2_traffic_bytes)?;
    writeln!(
        out,
        "predicted: {} cycles, {:.2} ms, {:.2} inferences/s",
        summary.cycles, summary.ms, summary.inferences_per_second
    )?;
    writeln!(
        out,
        "busy: core0 {:.3}  CDMA {:.3}  MDMA {:.3}",
        summary.core0_busy, summary.cdma_busy, summary.mdma_busy
    )?;
    if let Some(p) = &a.trace {
        writeln!(out, "trace: {} events written to {}", events.len(), p.display())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchOutput {
    baseline: BenchReport,
    candidate: BenchReport,
    comparison: BenchComparison,
    /// Published cells that disagree with their own row by more than 1%.
    inconsistent_published_cells: Vec<&'static str>,
}

fn cmd_bench_report(a: BenchArgs, out: &mut dyn Write) -> CmdResult {
    let parse = |s: &str, which: &str| {
        s.parse::<BenchInputs>()
            .map_err(|e| Failure::usage(format!("--{which}: {e}")))
    };
    let (b, c) = (parse(&a.baseline, "baseline")?, parse(&a.candidate, "candidate")?);
    let gop = if b.gop_per_inference.or(b.performance_gops).is_some()
        && c.gop_per_inference.or(c.performance_gops).is_some()
    {
        0.0
    } else {
        a.net.graph()?.count_ops()? as f64 / 1e9
    };
    let (baseline, candidate) = (bench_report(&b, gop)?, bench_report(&c, gop)?);
    let result = BenchOutput {
        comparison: compare(&baseline, &candidate),
        inconsistent_published_cells: [("baseline", &baseline), ("candidate", &candidate)]
            .into_iter()
            .filter(|(_, r)| r.published_consistent == Some(false))
            .map(|(n, _)| n)
            .collect(),
        baseline,
        candidate,
    };
    if a.json {
        return print_json(out, &result);
    }
    for (name, r) in [("baseline", &result.baseline), ("candidate", &result.candidate)] {
        write!(
            out,
            "{name:<9}  {:.2} inf/s  {:.1} mJ/inf  {:.1} GOPS  {:.1} GOPS/J",
            r.throughput, r.energy_per_inference_mj, r.performance_gops, r.energy_efficiency_gops_per_j
        )?;
        match (r.published_gops_per_j, r.published_consistent) {
            (Some(p), Some(false)) => writeln!(out, "  (published {p} GOPS/J is inconsistent)")?,
            (Some(p), _) => writeln!(out, "  (published {p} GOPS/J agrees)")?,
            _ => writeln!(out)?,
        }
    }
    writeln!(
        out,
        "speedup {:.2}x, energy improvement {:.1}%",
        result.comparison.speedup, result.comparison.energy_improvement_pct
    )?;
    Ok(())
}

/// Calibration inputs: the images of a dataset when `dir` holds a manifest,
/// otherwise every `.ppm` in `dir` in name order.
fn calibration_images(dir: &Path, graph: &NetworkGraph) -> std::result::Result<Vec<FloatTensor>, Failure> {
    if dir.join(MANIFEST).exists() {
        return Ok(dataset_tensors(dir, graph)?.0);
    }
    let entries = fs::read_dir(dir).map_err(|e| Failure::input(Error::io(dir, e)))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Failure::input(Error::io(dir, e)))?.path();
        if p.extension().is_some_and(|x| x == "ppm") {
            paths.push(p);
        }
    }
    paths.sort();
    let s = graph.config().input_shape;
    paths
        .par_iter()
        .map(|p| Ok(RgbImage::read(p)?.resize_nearest(s.width, s.height).to_tensor()))
        .collect::<Result<Vec<_>>>()
        .map_err(Failure::input)
}

#[derive(Serialize)]
struct QuantizeSummary {
    out: PathBuf,
    calibration_images: usize,
    /// Largest per-layer mean absolute error on the first calibration image,
    /// in units of that layer's output step.
    worst_layer: String,
    worst_error_steps: f32,
}

fn cmd_quantize(a: QuantizeArgs, out: &mut dyn Write) -> CmdResult {
    let g = a.net.graph()?;
    let images = calibration_images(&a.calib, &g)?;
    if images.is_empty() {
        return Err(Failure::new(EXIT_INPUT, format!("{}: no calibration images", a.calib.display())));
    }
    let Model::Float(float) = load_model(&a.weights, &g, Some(Mode::Float))? else {
        unreachable!("loaded as float")
    };
    let ranges = float.collect_ranges(&images)?;
    let quant = quantize_model(&float, &ranges)?;
    let errors = layer_errors(&float, &quant, &images[0])?;
    let worst = errors
        .iter()
        .max_by(|x, y| x.in_steps().total_cmp(&y.in_steps()))
        .expect("graph has layers");
    let summary = QuantizeSummary {
        out: a.out.clone(),
        calibration_images: images.len(),
        worst_layer: worst.label.clone(),
        worst_error_steps: worst.in_steps(),
    };
    save_weights(&Model::Int8(quant), &a.out).map_err(Failure::input)?;
    if a.json {
        return print_json(out, &summary);
    }
    writeln!(
        out,
        "calibrated on {} images; wrote int8 archive {}",
        summary.calibration_images,
        summary.out.display()
    )?;
    writeln!(
        out,
        "largest per-layer error: {} at {:.2} output steps",
        summary.worst_layer, summary.worst_error_steps
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    out: PathBuf,
    images: usize,
    objects: usize,
}

fn cmd_synth_data(a: SynthArgs, out: &mut dyn Write) -> CmdResult {
    if a.size == 0 {
        return Err(Failure::usage("--size must be positive"));
    }
    let entries = generate_shapes_dataset(a.n, a.seed, a.size, &a.out).map_err(Failure::input)?;
    let mut objects = 0;
    for e in &entries {
        objects += crate::evalkit::read_labels(a.out.join(&e.labels))
            .map_err(Failure::input)?
            .len();
    }
    let summary = SynthSummary {
        out: a.out,
        images: entries.len(),
        objects,
    };
    if a.json {
        return print_json(out, &summary);
    }
    writeln!(
        out,
        "wrote {} images with {} objects to {}",
        summary.images,
        summary.objects,
        summary.out.display()
    )?;
    Ok(())
}

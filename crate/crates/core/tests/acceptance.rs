//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Tolerances and runtime budgets are pinned below.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seyolo::cli::{bench_report, compare, detect_in_image, BenchInputs, YOLOV5S_PARAMS};
use seyolo::detect::{nms, BBox, Detection, GroundTruthBox};
use seyolo::evalkit::{average_precision, map_eval, render_shapes_image, ImageResult, ScoredBox};
use seyolo::graph::{
    build_squeezed_edge_yolo, quantize_model, scale_model, LayerKind, LayerNode, Model, NeckWidthSource, NetConfig,
    NetworkGraph, NodeId, Section,
};
use seyolo::kernels::{
    conv2d_exec, conv2d_q_exec, maxpool2x2, maxpool2x2_q, route_concat, route_concat_q, se_block, se_block_q,
    upsample_nearest2x, upsample_nearest2x_q, Activation, ConvGeometry, ConvSpec, Exec, QConvSpec, QSeSpec, SeSpec,
};
use seyolo::memplan::{calibrate, footprint, plan_exhaustive, plan_latency, plan_tiles, predict_latency, HardwareModel};
use seyolo::modelio::{archive_model, bind_archive, calibrate_objectness, init_random_weights, WeightArchive};
use seyolo::qtensor::{
    compute_qparams, dequantize, quantize, requantize, FloatTensor, QuantMode, QuantParams, QuantizedTensor,
    Requantizer, TensorShape,
};

const BUDGET_ARCH: Duration = Duration::from_secs(1);
const BUDGET_SIZE: Duration = Duration::from_secs(1);
const BUDGET_KERNELS: Duration = Duration::from_secs(30);
const BUDGET_BENCH: Duration = Duration::from_secs(1);
const BUDGET_PLAN: Duration = Duration::from_secs(60);

const KERNEL_CASES: usize = 200;
const FLOAT_REL_TOL: f64 = 1e-5;
const ROUNDTRIP_SAMPLES: usize = 100_000;
const REQUANT_SAMPLES: usize = 100_000;
const NMS_INSTANCES: usize = 100;
const AGREEMENT_IMAGES: usize = 100;
const AGREEMENT_TARGET: usize = 90;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn base() -> NetworkGraph {
    build_squeezed_edge_yolo(NetConfig::default()).unwrap()
}

fn shape(c: usize, h: usize, w: usize) -> TensorShape {
    TensorShape::new(c, h, w).unwrap()
}

// ---------------------------------------------------------------- 1

/// The printed Output column, `(H, W, C)`; `None` for Detect.
const TABLE_OUTPUTS: [Option<(usize, usize, usize)>; 31] = [
    Some((64, 64, 16)),
    Some((32, 32, 32)),
    Some((32, 32, 32)),
    Some((32, 32, 16)),
    Some((32, 32, 16)),
    Some((32, 32, 16)),
    Some((32, 32, 16)),
    Some((32, 32, 32)),
    Some((32, 32, 32)),
    Some((32, 32, 32)),
    Some((32, 32, 64)),
    Some((32, 32, 64)),
    Some((16, 16, 64)),
    Some((16, 16, 64)),
    Some((8, 8, 128)),
    Some((8, 8, 128)),
    Some((8, 8, 256)),
    Some((8, 8, 256)),
    Some((8, 8, 256)),
    Some((8, 8, 128)),
    Some((8, 8, 256)),
    Some((8, 8, 128)),
    Some((16, 16, 128)),
    Some((16, 16, 64)),
    Some((16, 16, 128)),
    Some((16, 16, 128)),
    Some((16, 16, 128)),
    Some((16, 16, 128)),
    Some((16, 16, 128)),
    Some((16, 16, 64)),
    None,
];

/// Under the Filters reading neck rows 8 and 9 carry the 64 filters of row 8.
fn filters_reading(i: usize) -> Option<(usize, usize, usize)> {
    match i {
        21 => Some((8, 8, 64)),
        22 => Some((16, 16, 64)),
        _ => TABLE_OUTPUTS[i],
    }
}

fn shapes_match(source: NeckWidthSource, expect: impl Fn(usize) -> Option<(usize, usize, usize)>) -> (usize, Vec<String>) {
    let mut config = NetConfig::default();
    config.neck_width_source = source;
    let g = build_squeezed_edge_yolo(config).unwrap();
    let shapes = g.infer_shapes().unwrap();
    let mut ok = 0;
    let mut bad = Vec::new();
    for i in 0..31 {
        let got = shapes.outputs.get(i).copied().flatten().map(|s| (s.height, s.width, s.channels));
        if got == expect(i) {
            ok += 1;
        } else {
            bad.push(format!("{}: {:?} vs {:?}", g.label(i), got, expect(i)));
        }
    }
    if g.len() != 31 {
        bad.push(format!("{} nodes", g.len()));
    }
    (ok, bad)
}

fn architecture() -> Outcome {
    let (ok, bad) = shapes_match(NeckWidthSource::FiltersColumn, filters_reading);
    let (ok_out, bad_out) = shapes_match(NeckWidthSource::OutputColumn, |i| TABLE_OUTPUTS[i]);
    let heads = base().infer_shapes().unwrap().heads;
    let heads_ok = heads == vec![shape(24, 8, 8), shape(24, 16, 16)];
    outcome(
        bad.is_empty() && bad_out.is_empty() && heads_ok,
        format!(
            "{ok}/31 entries under the Filters reading, {ok_out}/31 under the Output reading, heads {}{}",
            if heads_ok { "8x8x24 + 16x16x24" } else { "wrong" },
            bad.iter().chain(&bad_out).map(|b| format!("; {b}")).collect::<String>()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn oracle_param_count() -> usize {
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let se = |c: usize| {
        let h = (c / 4).max(1);
        2 * c * h + h + c
    };
    let backbone = conv(3, 3, 16) + conv(3, 16, 32) + se(32) + conv(3, 32, 16) + se(16) + conv(3, 16, 16) + se(16)
        + conv(3, 32, 32)
        + se(32)
        + se(64);
    let neck = conv(3, 64, 64) + conv(3, 64, 128) + se(128) + conv(1, 128, 256) + se(256) + conv(1, 256, 256)
        + conv(3, 256, 128)
        + conv(3, 256, 64)
        + conv(1, 64, 64)
        + conv(3, 128, 128)
        + se(128)
        + conv(1, 128, 128)
        + se(128)
        + conv(3, 128, 64);
    let stems = conv(1, 128, 24) + conv(1, 64, 24);
    backbone + neck + stems
}

fn model_size() -> Outcome {
    let count = base().param_count().unwrap();
    let oracle = oracle_param_count();
    let mbit = count as f64 * 8.0 / 1e6;
    let ratio = YOLOV5S_PARAMS / count as f64;
    let pass = count == oracle
        && (850_000..=1_020_000).contains(&count)
        && (mbit / 7.5 - 1.0).abs() <= 0.05
        && (7.1..=8.6).contains(&ratio);
    outcome(
        pass,
        format!("{count} parameters (oracle {oracle}), {mbit:.3} Mbit vs 7.5, YOLOv5s ratio {ratio:.2}"),
    )
}

// ---------------------------------------------------------------- 3

/// `round_half_even(acc * multiplier / 2^shift)` by Euclidean division.
fn fixed_point(acc: i64, rq: &Requantizer) -> i64 {
    let num = acc as i128 * rq.multiplier() as i128;
    let v = if rq.shift() <= 0 {
        num << (-rq.shift())
    } else {
        let den = 1i128 << rq.shift();
        let (q, r) = (num.div_euclid(den), num.rem_euclid(den));
        if 2 * r > den || (2 * r == den && q % 2 != 0) {
            q + 1
        } else {
            q
        }
    };
    v.clamp(i32::MIN as i128, i32::MAX as i128) as i64
}

fn to_i8(acc: i64, scale: f64, zp: i32) -> i8 {
    let rq = Requantizer::new(scale).unwrap();
    (fixed_point(acc, &rq) + zp as i64).clamp(-128, 127) as i8
}

fn rand_qp(rng: &mut ChaCha8Rng) -> QuantParams {
    QuantParams::new(rng.gen_range(0.002f32..0.2), rng.gen_range(-40..=40)).unwrap()
}

fn rand_q(rng: &mut ChaCha8Rng, s: TensorShape, qp: QuantParams) -> QuantizedTensor {
    QuantizedTensor::new(s, (0..s.numel()).map(|_| rng.gen()).collect(), qp).unwrap()
}

fn rand_f(rng: &mut ChaCha8Rng, s: TensorShape) -> FloatTensor {
    FloatTensor::new(s, (0..s.numel()).map(|_| rng.gen_range(-2.0f32..2.0)).collect()).unwrap()
}

fn rand_shape(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> TensorShape {
    shape(rng.gen_range(1..=max_c), rng.gen_range(1..=max_hw), rng.gen_range(1..=max_hw))
}

fn rand_activation(rng: &mut ChaCha8Rng) -> Activation {
    if rng.gen_bool(0.5) {
        Activation::Linear
    } else {
        Activation::LeakyRelu(0.1)
    }
}

/// Input pixel feeding output `(oy, ox)` at kernel tap `(ky, kx)`, if inside.
fn tap(g: &ConvGeometry, s: TensorShape, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
    let y = (oy * g.stride + ky) as isize - g.padding() as isize;
    let x = (ox * g.stride + kx) as isize - g.padding() as isize;
    (y >= 0 && x >= 0 && (y as usize) < s.height && (x as usize) < s.width).then_some((y as usize, x as usize))
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let s = rand_shape(rng, 6, 9);
    let g = ConvGeometry {
        kernel: if rng.gen_bool(0.5) { 1 } else { 3 },
        stride: rng.gen_range(1..=2),
        in_channels: s.channels,
        out_channels: rng.gen_range(1..=6),
    };
    let (oh, ow) = (s.height.div_ceil(g.stride), s.width.div_ceil(g.stride));
    let act = rand_activation(rng);
    let k = g.kernel;
    let widx = |o: usize, c: usize, ky: usize, kx: usize| ((o * g.in_channels + c) * k + ky) * k + kx;

    // int8
    let in_qp = rand_qp(rng);
    let input = rand_q(rng, s, in_qp);
    let spec = QConvSpec {
        geometry: g,
        weights: (0..g.weight_len()).map(|_| rng.gen_range(-127..=127)).collect(),
        weight_scales: (0..g.out_channels).map(|_| rng.gen_range(0.001f32..0.05)).collect(),
        bias: (0..g.out_channels).map(|_| rng.gen_range(-20_000..20_000)).collect(),
        activation: act,
        output: rand_qp(rng),
    };
    let mut want = Vec::new();
    for o in 0..g.out_channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = spec.bias[o] as i64;
                for c in 0..s.channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            if let Some((y, x)) = tap(&g, s, oy, ox, ky, kx) {
                                let q = input.data()[(c * s.height + y) * s.width + x] as i64;
                                acc += (q - in_qp.zero_point as i64) * spec.weights[widx(o, c, ky, kx)] as i64;
                            }
                        }
                    }
                }
                let ratio = in_qp.scale as f64 * spec.weight_scales[o] as f64 / spec.output.scale as f64;
                let scale = match act {
                    Activation::LeakyRelu(slope) if acc < 0 => ratio * slope as f64,
                    _ => ratio,
                };
                want.push(to_i8(acc, scale, spec.output.zero_point));
            }
        }
    }
    for exec in [Exec::Sequential, Exec::Parallel] {
        let got = conv2d_q_exec(&input, &spec, exec).map_err(|e| e.to_string())?;
        if got.data() != want.as_slice() || got.qparams() != spec.output {
            return Err(format!("int8 conv {g:?} on {s} ({exec:?})"));
        }
    }

    // float
    let x = rand_f(rng, s);
    let fspec = ConvSpec::new(
        g,
        (0..g.weight_len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        (0..g.out_channels).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        act,
    )
    .unwrap();
    for exec in [Exec::Sequential, Exec::Parallel] {
        let got = conv2d_exec(&x, &fspec, exec).map_err(|e| e.to_string())?;
        let mut i = 0;
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut sum = fspec.bias[o] as f64;
                    let mut mass = sum.abs();
                    for c in 0..s.channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some((y, xx)) = tap(&g, s, oy, ox, ky, kx) {
                                    let t = x.at(c, y, xx) as f64 * fspec.weights[widx(o, c, ky, kx)] as f64;
                                    sum += t;
                                    mass += t.abs();
                                }
                            }
                        }
                    }
                    let want = act.apply(sum as f32) as f64;
                    let err = (got.data()[i] as f64 - want).abs();
                    if err > FLOAT_REL_TOL * mass.max(f64::MIN_POSITIVE) {
                        return Err(format!("float conv {g:?}: {} vs {want}", got.data()[i]));
                    }
                    i += 1;
                }
            }
        }
    }
    Ok(())
}

fn pool_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let s = shape(rng.gen_range(1..=6), 2 * rng.gen_range(1..=5), 2 * rng.gen_range(1..=5));
    let qp = rand_qp(rng);
    let q = rand_q(rng, s, qp);
    let f = rand_f(rng, s);
    let gq = maxpool2x2_q(&q).map_err(|e| e.to_string())?;
    let gf = maxpool2x2(&f).map_err(|e| e.to_string())?;
    let (oh, ow) = (s.height / 2, s.width / 2);
    let mut i = 0;
    for c in 0..s.channels {
        for y in 0..oh {
            for x in 0..ow {
                let cells = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| (c * s.height + 2 * y + dy) * s.width + 2 * x + dx);
                let wq = cells.iter().map(|&j| q.data()[j]).max().unwrap();
                let wf = cells.iter().map(|&j| f.data()[j]).fold(f32::NEG_INFINITY, f32::max);
                if gq.data()[i] != wq || gf.data()[i] != wf {
                    return Err(format!("maxpool on {s} at {c},{y},{x}"));
                }
                i += 1;
            }
        }
    }
    (gq.qparams() == qp && gq.shape() == shape(s.channels, oh, ow))
        .then_some(())
        .ok_or_else(|| format!("maxpool metadata on {s}"))
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let s = rand_shape(rng, 6, 8);
    let qp = rand_qp(rng);
    let q = rand_q(rng, s, qp);
    let f = rand_f(rng, s);
    let gq = upsample_nearest2x_q(&q);
    let gf = upsample_nearest2x(&f);
    let mut i = 0;
    for c in 0..s.channels {
        for y in 0..2 * s.height {
            for x in 0..2 * s.width {
                let j = (c * s.height + y / 2) * s.width + x / 2;
                if gq.data()[i] != q.data()[j] || gf.data()[i] != f.data()[j] {
                    return Err(format!("upsample on {s} at {c},{y},{x}"));
                }
                i += 1;
            }
        }
    }
    (gq.qparams() == qp).then_some(()).ok_or_else(|| "upsample qparams".into())
}

fn route_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
    let out_qp = rand_qp(rng);
    let n = rng.gen_range(1..=3);
    let qs: Vec<QuantizedTensor> = (0..n)
        .map(|_| {
            let qp = if rng.gen_bool(0.3) { out_qp } else { rand_qp(rng) };
            let s = shape(rng.gen_range(1..=5), h, w);
            rand_q(rng, s, qp)
        })
        .collect();
    let fs: Vec<FloatTensor> = qs.iter().map(|q| rand_f(rng, q.shape())).collect();
    let mut want = Vec::new();
    for q in &qs {
        let qp = q.qparams();
        for &v in q.data() {
            want.push(if qp == out_qp {
                v
            } else {
                to_i8(v as i64 - qp.zero_point as i64, qp.scale as f64 / out_qp.scale as f64, out_qp.zero_point)
            });
        }
    }
    let want_f: Vec<f32> = fs.iter().flat_map(|f| f.data().iter().copied()).collect();
    let gq = route_concat_q(&qs.iter().collect::<Vec<_>>(), out_qp).map_err(|e| e.to_string())?;
    let gf = route_concat(&fs.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    (gq.data() == want.as_slice() && gf.data() == want_f.as_slice() && gq.qparams() == out_qp)
        .then_some(())
        .ok_or_else(|| format!("route of {n} inputs at {h}x{w}"))
}

fn se_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let s = rand_shape(rng, 8, 6);
    let (c, hid) = (s.channels, rng.gen_range(1..=4));
    let in_qp = rand_qp(rng);
    let input = rand_q(rng, s, in_qp);
    let spec = QSeSpec {
        channels: c,
        hidden: hid,
        fc1_weight: (0..c * hid).map(|_| rng.gen_range(-127..=127)).collect(),
        fc1_scales: (0..hid).map(|_| rng.gen_range(0.002f32..0.02)).collect(),
        fc1_bias: (0..hid).map(|_| rng.gen_range(-3000..3000)).collect(),
        fc2_weight: (0..c * hid).map(|_| rng.gen_range(-127..=127)).collect(),
        fc2_scales: (0..c).map(|_| rng.gen_range(0.002f32..0.02)).collect(),
        fc2_bias: (0..c).map(|_| rng.gen_range(-3000..3000)).collect(),
        pool: rand_qp(rng),
        hidden_q: rand_qp(rng),
        logit: rand_qp(rng),
        output: rand_qp(rng),
    };
    let plane = s.height * s.width;
    let zp = in_qp.zero_point as i64;
    let pooled: Vec<i64> = (0..c)
        .map(|ch| {
            let sum: i64 = input.data()[ch * plane..(ch + 1) * plane].iter().map(|&q| q as i64 - zp).sum();
            let scale = in_qp.scale as f64 / (plane as f64 * spec.pool.scale as f64);
            to_i8(sum, scale, spec.pool.zero_point) as i64 - spec.pool.zero_point as i64
        })
        .collect();
    let hidden: Vec<i64> = (0..hid)
        .map(|h| {
            let acc = spec.fc1_bias[h] as i64 + (0..c).map(|ch| spec.fc1_weight[h * c + ch] as i64 * pooled[ch]).sum::<i64>();
            let scale = spec.pool.scale as f64 * spec.fc1_scales[h] as f64 / spec.hidden_q.scale as f64;
            let q = to_i8(acc, scale, spec.hidden_q.zero_point).max(spec.hidden_q.zero_point as i8);
            q as i64 - spec.hidden_q.zero_point as i64
        })
        .collect();
    let mut want = Vec::new();
    for ch in 0..c {
        let acc = spec.fc2_bias[ch] as i64 + (0..hid).map(|h| spec.fc2_weight[ch * hid + h] as i64 * hidden[h]).sum::<i64>();
        let scale = spec.hidden_q.scale as f64 * spec.fc2_scales[ch] as f64 / spec.logit.scale as f64;
        let logit = to_i8(acc, scale, spec.logit.zero_point) as i64;
        let x = spec.logit.scale as f64 * (logit - spec.logit.zero_point as i64) as f64;
        let gate = (32768.0 / (1.0 + (-x).exp())).round() as i64;
        let out_scale = in_qp.scale as f64 / (32768.0 * spec.output.scale as f64);
        for &q in &input.data()[ch * plane..(ch + 1) * plane] {
            want.push(to_i8((q as i64 - zp) * gate, out_scale, spec.output.zero_point));
        }
    }
    let got = se_block_q(&input, &spec).map_err(|e| e.to_string())?;
    if got.data() != want.as_slice() {
        return Err(format!("int8 SE {c}->{hid} on {s}"));
    }

    let fs = SeSpec {
        channels: c,
        hidden: hid,
        fc1_weight: (0..c * hid).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        fc1_bias: (0..hid).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        fc2_weight: (0..c * hid).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        fc2_bias: (0..c).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
    };
    let x = rand_f(rng, s);
    let pool: Vec<f64> = (0..c).map(|ch| x.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect();
    let hv: Vec<f64> = (0..hid)
        .map(|h| (fs.fc1_bias[h] as f64 + (0..c).map(|ch| fs.fc1_weight[h * c + ch] as f64 * pool[ch]).sum::<f64>()).max(0.0))
        .collect();
    let got = se_block(&x, &fs).map_err(|e| e.to_string())?;
    for ch in 0..c {
        let l = fs.fc2_bias[ch] as f64 + (0..hid).map(|h| fs.fc2_weight[ch * hid + h] as f64 * hv[h]).sum::<f64>();
        let g = 1.0 / (1.0 + (-l).exp());
        for (i, &v) in x.channel(ch).iter().enumerate() {
            let want = g * v as f64;
            if (got.channel(ch)[i] as f64 - want).abs() > FLOAT_REL_TOL * (v as f64).abs() {
                return Err(format!("float SE {c}->{hid}: {} vs {want}", got.channel(ch)[i]));
            }
        }
    }
    Ok(())
}

fn kernels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases: [(&str, fn(&mut ChaCha8Rng) -> Result<(), String>); 5] = [
        ("conv", conv_case),
        ("pool", pool_case),
        ("upsample", upsample_case),
        ("SE", se_case),
        ("route", route_case),
    ];
    let mut failures = Vec::new();
    for (name, case) in cases {
        let bad = (0..KERNEL_CASES).filter_map(|_| case(&mut rng).err()).collect::<Vec<_>>();
        if let Some(first) = bad.first() {
            failures.push(format!("{name}: {} failed, first {first}", bad.len()));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("{KERNEL_CASES} cases each of conv/pool/upsample/SE/route bit-exact in int8, float within {FLOAT_REL_TOL:e} relative")
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 4

/// Exact `round_half_even(acc * scale)` from the binary expansion of `scale`.
fn exact_scaled(acc: i32, scale: f64) -> i128 {
    let bits = scale.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    let mant = ((bits & ((1u64 << 52) - 1)) | (1u64 << 52)) as i128;
    let e = exp - 1075;
    let num = acc as i128 * mant;
    if e >= 0 {
        return num << e;
    }
    let den = 1i128 << (-e);
    let (q, r) = (num.div_euclid(den), num.rem_euclid(den));
    if 2 * r > den || (2 * r == den && q % 2 != 0) {
        q + 1
    } else {
        q
    }
}

fn quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut roundtrip_ok = true;
    for _ in 0..ROUNDTRIP_SAMPLES {
        let (a, b) = (rng.gen_range(-50.0f32..50.0), rng.gen_range(-50.0f32..50.0));
        let (lo, hi) = (a.min(b), a.max(b));
        let mode = if rng.gen_bool(0.5) { QuantMode::Symmetric } else { QuantMode::Asymmetric };
        let Ok(qp) = compute_qparams(lo, hi, mode) else {
            continue;
        };
        let x = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let back = qp.dequantize_value(qp.quantize_value(x));
        let err = (back - x).abs() as f64;
        let bound = qp.scale as f64 / 2.0 * (1.0 + 1e-6) + f32::EPSILON as f64 * x.abs() as f64;
        worst = worst.max(err / qp.scale as f64);
        roundtrip_ok &= err <= bound;
    }
    // tensor path agrees with the scalar one
    let s = shape(4, 8, 8);
    let t = rand_f(&mut rng, s);
    let (lo, hi) = t.min_max();
    let qp = compute_qparams(lo, hi, QuantMode::Asymmetric).unwrap();
    let back = dequantize(&quantize(&t, qp));
    let tensor_ok = t
        .data()
        .iter()
        .zip(back.data())
        .all(|(&x, &y)| y == qp.dequantize_value(qp.quantize_value(x)) && (x - y).abs() <= qp.scale / 2.0 * (1.0 + 1e-6));

    let mut max_diff = 0i128;
    let mut exact = 0usize;
    for _ in 0..REQUANT_SAMPLES {
        let scale = 10f64.powf(rng.gen_range(-6.0..0.5));
        let zp = rng.gen_range(-128..=127);
        let span = (300.0 / scale).min(i32::MAX as f64) as i64;
        let acc = rng.gen_range(-span..=span) as i32;
        let got = requantize(acc, &Requantizer::new(scale).unwrap(), zp) as i128;
        let want = (exact_scaled(acc, scale) + zp as i128).clamp(-128, 127);
        max_diff = max_diff.max((got - want).abs());
        exact += usize::from(got == want);
    }
    outcome(
        roundtrip_ok && tensor_ok && max_diff <= 1,
        format!(
            "roundtrip worst {worst:.4} scale over {ROUNDTRIP_SAMPLES} samples (bound 0.5), tensor path {}, requantize max diff {max_diff} ({exact}/{REQUANT_SAMPLES} exact)",
            if tensor_ok { "ok" } else { "mismatch" }
        ),
    )
}

// ---------------------------------------------------------------- 5

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4))
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    BBox::new(
        b.cx + rng.gen_range(-0.03..0.03),
        b.cy + rng.gen_range(-0.03..0.03),
        b.w * rng.gen_range(0.85..1.15),
        b.h * rng.gen_range(0.85..1.15),
    )
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut nms_ok = 0;
    for _ in 0..NMS_INSTANCES {
        let n = rng.gen_range(1..=50);
        let coarse = rng.gen_bool(0.3);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let score: f32 = rng.gen_range(0.0..1.0);
                Detection {
                    class_id: rng.gen_range(0..3),
                    score: if coarse { (score * 10.0).round() / 10.0 } else { score },
                    bbox: rand_box(&mut rng),
                }
            })
            .collect();
        let thr = rng.gen_range(0.2f32..0.8);
        nms_ok += usize::from(nms(&dets, thr) == common::nms_oracle(&dets, thr));
    }

    // GT a and b; d1 overlaps both and takes a, d2 only overlaps a, d3 takes b
    let a = BBox::new(0.3, 0.5, 0.2, 0.2);
    let b = BBox::new(0.42, 0.5, 0.2, 0.2);
    let sb = |score, bbox| ScoredBox { image: 0, score, bbox };
    let dets = [sb(0.9, BBox::new(0.355, 0.5, 0.2, 0.2)), sb(0.8, BBox::new(0.28, 0.5, 0.2, 0.2)), sb(0.7, b)];
    let fixture = average_precision(&dets, &[(0, a), (0, b)], 0.5);

    let mut oracle_images = Vec::new();
    for _ in 0..20 {
        let (_, gts) = render_shapes_image(&mut rng, 128);
        let dets = gts
            .iter()
            .map(|g| Detection {
                class_id: g.class_id,
                score: 1.0,
                bbox: g.bbox,
            })
            .collect();
        oracle_images.push(ImageResult {
            detections: dets,
            ground_truths: gts,
        });
    }
    let oracle_map = map_eval(&oracle_images, 3, 0.5).unwrap().map;

    let mut sweep_worst = 0.0f64;
    for _ in 0..20 {
        let images: Vec<(Vec<Detection>, Vec<GroundTruthBox>)> = (0..5)
            .map(|_| {
                let gts: Vec<GroundTruthBox> = (0..rng.gen_range(0..5))
                    .map(|_| GroundTruthBox {
                        class_id: rng.gen_range(0..3),
                        bbox: rand_box(&mut rng),
                    })
                    .collect();
                let mut dets = Vec::new();
                for g in &gts {
                    if rng.gen_bool(0.8) {
                        dets.push(Detection {
                            class_id: g.class_id,
                            score: (rng.gen_range(0.05f32..1.0) * 20.0).round() / 20.0,
                            bbox: jitter(&mut rng, &g.bbox),
                        });
                    }
                }
                for _ in 0..rng.gen_range(0..4) {
                    dets.push(Detection {
                        class_id: rng.gen_range(0..3),
                        score: (rng.gen_range(0.05f32..1.0) * 20.0).round() / 20.0,
                        bbox: rand_box(&mut rng),
                    });
                }
                (dets, gts)
            })
            .collect();
        let results: Vec<ImageResult> = images
            .iter()
            .map(|(d, g)| ImageResult {
                detections: d.clone(),
                ground_truths: g.clone(),
            })
            .collect();
        let got = map_eval(&results, 3, 0.5).unwrap().map;
        sweep_worst = sweep_worst.max((got - common::map_oracle(&images, 3, 0.5)).abs());
    }

    let pass = nms_ok == NMS_INSTANCES
        && (fixture - 5.0 / 6.0).abs() < 1e-12
        && (oracle_map - 1.0).abs() <= 1e-9
        && sweep_worst <= 1e-9;
    outcome(
        pass,
        format!(
            "NMS {nms_ok}/{NMS_INSTANCES} equal to the quadratic oracle, fixture AP {fixture:.6} (5/6), oracle mAP {oracle_map}, 5-image mAP worst deviation {sweep_worst:e} over 20 fixtures"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn bench() -> Outcome {
    let baseline: BenchInputs = "latency_ms=231,cpu_mw=777,gpu_mw=3846,gops=198.2,published_gops_per_j=185.7".parse().unwrap();
    let candidate: BenchInputs = "latency_ms=70,cpu_mw=1158,gpu_mw=2434,gops=94.3,published_gops_per_j=788.5".parse().unwrap();
    let b = bench_report(&baseline, 0.0).unwrap();
    let c = bench_report(&candidate, 0.0).unwrap();
    let cmp = compare(&b, &c);
    let checks = [
        (c.throughput, 14.2, 0.1),
        (b.throughput, 4.2, 0.2),
        (c.energy_per_inference_mj, 251.5, 0.5),
        (b.energy_per_inference_mj, 1068.0, 1.0),
        (cmp.speedup, 3.3, 0.1),
        (cmp.energy_improvement_pct, 76.0, 1.0),
        (b.energy_efficiency_gops_per_j, 185.7, 0.5),
    ];
    let pass = checks.iter().all(|&(v, want, tol)| (v - want).abs() <= tol) && c.published_consistent == Some(false);
    outcome(
        pass,
        format!(
            "{:.2} / {:.2} inf/s, {:.2} / {:.2} mJ, {:.2}x, {:.2}% less energy, baseline {:.2} GOPS/J; candidate 788.5 GOPS/J flagged inconsistent (computed {:.1})",
            c.throughput,
            b.throughput,
            c.energy_per_inference_mj,
            b.energy_per_inference_mj,
            cmp.speedup,
            cmp.energy_improvement_pct,
            b.energy_efficiency_gops_per_j,
            c.energy_efficiency_gops_per_j
        ),
    )
}

// ---------------------------------------------------------------- 7

fn toy(rng: &mut ChaCha8Rng) -> (NetworkGraph, HardwareModel) {
    let size = if rng.gen_bool(0.5) { 16 } else { 32 };
    let nodes = (0..rng.gen_range(1..=3))
        .map(|i| LayerNode {
            id: NodeId {
                section: Section::Backbone,
                index: i,
            },
            kind: LayerKind::Conv {
                kernel: if rng.gen_bool(0.5) { 1 } else { 3 },
                stride: rng.gen_range(1..=2),
                filters: rng.gen_range(1..=12),
            },
        })
        .collect();
    let g = NetworkGraph::new(NetConfig::default().with_input_size(size), nodes).unwrap();
    let peak = footprint(&g).unwrap().peak_activation_bytes;
    let l1 = rng.gen_range(16..=4096);
    let hw = HardwareModel {
        l1_bytes: l1,
        l2_bytes: (l1 + 1).max(peak + rng.gen_range(0..=3000)),
        effective_macs_per_core_cycle: rng.gen_range(0.05..4.0),
        ..Default::default()
    };
    (g, hw)
}

fn planning() -> Outcome {
    let base = base();
    let hw = calibrate(&HardwareModel::default(), &base, 130.0).unwrap();
    let mut rows = Vec::new();
    let mut l1_ok = true;
    for factor in [1.0, 2.0, 4.0] {
        let g = if factor == 1.0 { base.clone() } else { scale_model(&base, factor).unwrap() };
        let plan = plan_tiles(&g, &hw).unwrap();
        l1_ok &= plan.peak_l1_bytes <= 65_536 && plan.layers.iter().all(|l| l.working_set_bytes <= 65_536);
        rows.push((plan.l3_traffic_bytes(), predict_latency(&plan, &hw)));
    }
    let increasing = rows.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1.cycles < w[1].1.cycles);
    let ips = plan_latency(&base, &hw).unwrap().inferences_per_second();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let toys = 100;
    let mut equal = 0;
    for _ in 0..toys {
        let (g, thw) = toy(&mut rng);
        let oracle = plan_exhaustive(&g, &thw).unwrap();
        let got = plan_tiles(&g, &thw)
            .ok()
            .map(|p| (predict_latency(&p, &thw).cycles, p.weight_bytes - p.resident_weight_bytes));
        equal += usize::from(got == oracle);
    }
    let pass = l1_ok && increasing && (ips - 7.7).abs() <= 0.1 && equal == toys && rows[0].0 == 588_616;
    outcome(
        pass,
        format!(
            "L1 peak within 65536 at 1/2/4x: {l1_ok}; L3 traffic {} / {} / {} B; latency {:.2} / {:.2} / {:.2} ms; {ips:.2} inf/s after calibration; {equal}/{toys} toy graphs equal exhaustive search",
            rows[0].0, rows[1].0, rows[2].0, rows[0].1.ms, rows[1].1.ms, rows[2].1.ms
        ),
    )
}

// ---------------------------------------------------------------- 8

fn footprint_check() -> Outcome {
    let f = footprint(&base()).unwrap();
    outcome(f.input_bytes == 49_152, format!("input {} bytes", f.input_bytes))
}

// ---------------------------------------------------------------- 9

fn cli_pipeline(dir: &std::path::Path, threads: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let steps: [&[&str]; 9] = [
        &["synth-data", "--out", "data", "--n", "6", "--seed", "9"],
        &["init-weights", "--out", "float.seyw", "--seed", "2", "--calibrate-objectness", "data"],
        &["quantize", "--weights", "float.seyw", "--calib", "data", "--out", "int8.seyw", "--json"],
        &["infer", "--image", "data/images/00000.ppm", "--weights", "float.seyw"],
        &["infer", "--image", "data/images/00001.ppm", "--weights", "int8.seyw", "--annotate", "boxes.ppm", "--json"],
        &["eval", "--data", "data", "--weights", "int8.seyw", "--json"],
        &["plan", "--scale", "2", "--trace", "trace.csv", "--json"],
        &["model-info", "--json"],
        &["bench-report", "--baseline", "latency_ms=231,cpu_mw=777,gpu_mw=3846,gops=198.2", "--candidate", "latency_ms=70,cpu_mw=1158,gpu_mw=2434,gops=94.3"],
    ];
    let mut outputs = Vec::new();
    for args in steps {
        let out = common::run_cli(dir, Some(threads), args);
        if !out.status.success() {
            return Err(format!("{} exited {:?}: {}", args[0], out.status.code(), String::from_utf8_lossy(&out.stderr)));
        }
        outputs.push((args.join(" "), out.stdout));
    }
    let mut files: Vec<_> = walk(dir);
    files.sort();
    for f in files {
        let bytes = std::fs::read(&f).map_err(|e| e.to_string())?;
        outputs.push((f.strip_prefix(dir).unwrap().display().to_string(), bytes));
    }
    Ok(outputs)
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn determinism() -> Result<usize, String> {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ra = cli_pipeline(a.path(), 1)?;
    let rb = cli_pipeline(b.path(), 4)?;
    if ra.len() != rb.len() {
        return Err(format!("{} vs {} artifacts", ra.len(), rb.len()));
    }
    for ((na, xa), (nb, xb)) in ra.iter().zip(&rb) {
        if na != nb || xa != xb {
            return Err(format!("{na} differs"));
        }
    }
    Ok(ra.len())
}

fn agreement() -> Result<usize, String> {
    let g = base();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let rendered: Vec<_> = (0..32).map(|_| render_shapes_image(&mut rng, 128)).collect();
    let objects = rendered.iter().map(|(_, gt)| gt.len()).sum::<usize>() as f64 / rendered.len() as f64;
    let calib: Vec<_> = rendered.iter().map(|(img, _)| img.to_tensor()).collect();
    let mut float = init_random_weights(&g, 1);
    calibrate_objectness(&mut float, &calib, objects, 0.25, 0.45).map_err(|e| e.to_string())?;
    let ranges = float.collect_ranges(&calib).map_err(|e| e.to_string())?;
    let int8 = Model::Int8(quantize_model(&float, &ranges).map_err(|e| e.to_string())?);
    let float = Model::Float(float);
    let mut same = 0;
    for _ in 0..AGREEMENT_IMAGES {
        let img = render_shapes_image(&mut rng, 128).0;
        let a = detect_in_image(&float, &img, 0.25, 0.45).map_err(|e| e.to_string())?.len();
        let b = detect_in_image(&int8, &img, 0.25, 0.45).map_err(|e| e.to_string())?.len();
        same += usize::from(a == b);
    }
    Ok(same)
}

fn roundtrip() -> Result<(), String> {
    let g = base();
    let float = init_random_weights(&g, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let calib: Vec<_> = (0..4).map(|_| render_shapes_image(&mut rng, 128).0.to_tensor()).collect();
    let ranges = float.collect_ranges(&calib).map_err(|e| e.to_string())?;
    let int8 = Model::Int8(quantize_model(&float, &ranges).map_err(|e| e.to_string())?);
    for model in [Model::Float(float), int8] {
        let bytes = archive_model(&model).to_bytes();
        let parsed = WeightArchive::from_bytes(&bytes).map_err(|e| e.to_string())?;
        if parsed.to_bytes() != bytes {
            return Err(format!("{} archive bytes changed on reparse", model.mode()));
        }
        let bound = bind_archive(parsed, &g).map_err(|e| e.to_string())?;
        if archive_model(&bound).to_bytes() != bytes {
            return Err(format!("{} model changed through the archive", model.mode()));
        }
        let x = &calib[0];
        let (ya, yb) = (model.infer(x, Exec::Sequential), bound.infer(x, Exec::Sequential));
        if ya.map_err(|e| e.to_string())? != yb.map_err(|e| e.to_string())? {
            return Err(format!("{} inference changed through the archive", model.mode()));
        }
    }
    Ok(())
}

fn substitutes() -> Outcome {
    let det = determinism();
    let agree = agreement();
    let rt = roundtrip();
    let det_ok = det.is_ok();
    let agree_ok = matches!(agree, Ok(n) if n >= AGREEMENT_TARGET);
    let rt_ok = rt.is_ok();
    outcome(
        det_ok && agree_ok && rt_ok,
        format!(
            "not reproducible here: 0.95 mAP, 541 mW GAP8 power, absolute Jetson latencies, GVSOC traces. Substitutes: CLI determinism {}; int8/float same detection count {} (need >= {AGREEMENT_TARGET}/{AGREEMENT_IMAGES}); SEYW roundtrip {}",
            match &det {
                Ok(n) => format!("PASS ({n} outputs byte-identical, 1 vs 4 threads)"),
                Err(e) => format!("FAIL ({e})"),
            },
            match &agree {
                Ok(n) => format!("{} {n}/{AGREEMENT_IMAGES}", if agree_ok { "PASS" } else { "FAIL" }),
                Err(e) => format!("FAIL ({e})"),
            },
            match &rt {
                Ok(()) => "PASS (float and int8 bit-exact)".to_string(),
                Err(e) => format!("FAIL ({e})"),
            }
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome, Option<Duration>); 9] = [
        (1, "architecture fidelity", architecture, Some(BUDGET_ARCH)),
        (2, "model size", model_size, Some(BUDGET_SIZE)),
        (3, "kernel correctness", kernels, Some(BUDGET_KERNELS)),
        (4, "quantization properties", quantization, None),
        (5, "detection metrics", metrics, None),
        (6, "bench arithmetic", bench, Some(BUDGET_BENCH)),
        (7, "memory planning", planning, Some(BUDGET_PLAN)),
        (8, "footprint", footprint_check, None),
        (9, "desk-scale substitutes", substitutes, None),
    ];
    let mut failed = 0;
    for (n, name, check, budget) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| outcome(false, format!("panicked: {}", panic_message(&p))));
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed < b);
        let pass = result.pass && in_budget;
        failed += usize::from(!pass);
        let budget_note = match budget {
            Some(b) if !in_budget => format!(", over the {:.0} s budget", b.as_secs_f64()),
            _ => String::new(),
        };
        println!(
            "criterion {n} {}: {name}: {} ({:.2} s{budget_note})",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 9 criteria pass", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown".into())
}

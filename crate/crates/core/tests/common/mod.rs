//! Independent reference implementations shared by the integration suites.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use seyolo::detect::{BBox, Detection, GroundTruthBox};

pub fn seyolo_bin() -> &'static str {
    env!("CARGO_BIN_EXE_seyolo")
}

/// Runs the CLI in `dir` with an optional thread cap.
pub fn run_cli(dir: &Path, threads: Option<usize>, args: &[&str]) -> Output {
    let mut cmd = Command::new(seyolo_bin());
    cmd.current_dir(dir).args(args).env_remove("SEYOLO_THREADS");
    if let Some(t) = threads {
        cmd.env("SEYOLO_THREADS", t.to_string());
    }
    cmd.output().expect("spawn seyolo")
}

pub fn iou64(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ax1) = (a.cx as f64 - a.w as f64 / 2.0, a.cx as f64 + a.w as f64 / 2.0);
    let (ay0, ay1) = (a.cy as f64 - a.h as f64 / 2.0, a.cy as f64 + a.h as f64 / 2.0);
    let (bx0, bx1) = (b.cx as f64 - b.w as f64 / 2.0, b.cx as f64 + b.w as f64 / 2.0);
    let (by0, by1) = (b.cy as f64 - b.h as f64 / 2.0, b.cy as f64 + b.h as f64 / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Quadratic greedy NMS: a detection's rank is the number of detections
/// that precede it (higher score, then lower class, then earlier input).
pub fn nms_oracle(dets: &[Detection], thr: f32) -> Vec<Detection> {
    let n = dets.len();
    let before = |j: usize, i: usize| {
        let (a, b) = (&dets[j], &dets[i]);
        a.score > b.score
            || (a.score == b.score && (a.class_id < b.class_id || (a.class_id == b.class_id && j < i)))
    };
    let mut at_rank = vec![0; n];
    for i in 0..n {
        let r = (0..n).filter(|&j| j != i && before(j, i)).count();
        at_rank[r] = i;
    }
    let mut keep = vec![false; n];
    let mut out = Vec::new();
    for &i in &at_rank {
        let clear = (0..n).all(|j| {
            !(keep[j] && dets[j].class_id == dets[i].class_id) || (iou64(&dets[j].bbox, &dets[i].bbox) as f32) < thr
        });
        if clear {
            keep[i] = true;
            out.push(dets[i]);
        }
    }
    out
}

/// AP of one class by sweeping every distinct score as a threshold,
/// rematching from scratch at each threshold, and integrating the
/// interpolated precision over recall.
pub fn ap_sweep_oracle(dets: &[(usize, Detection)], gts: &[(usize, BBox)], iou_thr: f32) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut thresholds: Vec<f32> = dets.iter().map(|d| d.1.score).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = Vec::new();
    for &t in &thresholds {
        let mut kept: Vec<&(usize, Detection)> = dets.iter().filter(|d| d.1.score >= t).collect();
        kept.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.0.cmp(&b.0))
                .then(a.1.bbox.cx.total_cmp(&b.1.bbox.cx))
                .then(a.1.bbox.cy.total_cmp(&b.1.bbox.cy))
                .then(a.1.bbox.w.total_cmp(&b.1.bbox.w))
                .then(a.1.bbox.h.total_cmp(&b.1.bbox.h))
        });
        let mut taken = vec![false; gts.len()];
        let mut tp = 0usize;
        for (img, d) in &kept {
            let mut best: Option<(usize, f64)> = None;
            for (g, (gimg, gb)) in gts.iter().enumerate() {
                if gimg != img || taken[g] {
                    continue;
                }
                let v = iou64(&d.bbox, gb);
                if (v as f32) >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / kept.len() as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..points.len() {
        let p = points[i..].iter().map(|x| x.1).fold(0.0, f64::max);
        ap += (points[i].0 - prev) * p;
        prev = points[i].0;
    }
    ap
}

/// Mean over classes with ground truth of the sweep oracle.
pub fn map_oracle(images: &[(Vec<Detection>, Vec<GroundTruthBox>)], classes: usize, iou_thr: f32) -> f64 {
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..classes {
        let dets: Vec<(usize, Detection)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, (d, _))| d.iter().filter(|d| d.class_id == c).map(move |d| (i, *d)))
            .collect();
        let gts: Vec<(usize, BBox)> = images
            .iter()
            .enumerate()
            .flat_map(|(i, (_, g))| g.iter().filter(|g| g.class_id == c).map(move |g| (i, g.bbox)))
            .collect();
        if !gts.is_empty() {
            sum += ap_sweep_oracle(&dets, &gts, iou_thr);
            counted += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    }
}

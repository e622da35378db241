//! Head decoding, IoU and per-class greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::graph::NetworkGraph;
use crate::kernels::sigmoid;
use crate::qtensor::FloatTensor;
use crate::{Error, Result};

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.25;
pub const DEFAULT_NMS_IOU: f32 = 0.45;

/// Center-size box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: BBox,
}

pub fn iou(a: &BBox, b: &BBox) -> f32 {
    // f64 keeps corner differences exact for f32 inputs
    let span = |c: f32, e: f32| (c as f64 - e as f64 / 2.0, c as f64 + e as f64 / 2.0);
    let ((ax0, ax1), (ay0, ay1)) = (span(a.cx, a.w), span(a.cy, a.h));
    let ((bx0, bx1), (by0, by1)) = (span(b.cx, b.w), span(b.cy, b.h));
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w as f64 * a.h as f64 + b.w as f64 * b.h as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0) as f32
}

/// Decodes one head laid out as `anchors x (tx, ty, tw, th, obj, cls...)`
/// channels over a `grid x grid` map.
///
/// Emits a detection for every cell/anchor whose `sigmoid(obj) *
/// max_c sigmoid(cls_c)` is strictly above `conf_threshold`.
pub fn decode(
    head: &FloatTensor,
    anchors: &[(f32, f32)],
    grid: usize,
    conf_threshold: f32,
    image_size: usize,
) -> Result<Vec<Detection>> {
    let shape = head.shape();
    if anchors.is_empty() || shape.channels % anchors.len() != 0 || shape.channels / anchors.len() < 6 {
        return Err(Error::ChannelMismatch {
            op: "decode",
            expected: anchors.len() * 6,
            actual: shape.channels,
        });
    }
    if shape.height != grid || shape.width != grid {
        return Err(Error::SpatialMismatch {
            op: "decode",
            detail: format!("head is {}x{}, grid is {grid}", shape.height, shape.width),
        });
    }
    let per_anchor = shape.channels / anchors.len();
    let g = grid as f32;
    let size = image_size as f32;
    let mut out = Vec::new();
    for i in 0..grid {
        for j in 0..grid {
            for (a, &(aw, ah)) in anchors.iter().enumerate() {
                let v = |k: usize| head.at(a * per_anchor + k, i, j);
                let (class_id, best) = (5..per_anchor)
                    .map(|k| v(k))
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |(bi, bv), (c, x)| {
                        if x > bv {
                            (c, x)
                        } else {
                            (bi, bv)
                        }
                    });
                let score = sigmoid(v(4)) * sigmoid(best);
                if score <= conf_threshold {
                    continue;
                }
                out.push(Detection {
                    class_id,
                    score,
                    bbox: BBox {
                        cx: (sigmoid(v(0)) + j as f32) / g,
                        cy: (sigmoid(v(1)) + i as f32) / g,
                        w: aw * v(2).exp() / size,
                        h: ah * v(3).exp() / size,
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Decodes every head of `graph` and applies NMS.
pub fn detect_objects(
    graph: &NetworkGraph,
    heads: &[FloatTensor],
    conf_threshold: f32,
    nms_iou: f32,
) -> Result<Vec<Detection>> {
    let config = graph.config();
    if heads.len() != config.anchors.len() {
        return Err(Error::InvalidArgument(format!(
            "{} heads for {} anchor sets",
            heads.len(),
            config.anchors.len()
        )));
    }
    let mut all = Vec::new();
    for (head, anchors) in heads.iter().zip(&config.anchors) {
        let grid = head.shape().height;
        all.extend(decode(head, anchors, grid, conf_threshold, config.input_shape.width)?);
    }
    Ok(nms(&all, nms_iou))
}

/// Descending score, then ascending class id; `sort_by` keeps input order for the rest.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class NMS. A box survives iff its IoU with every kept box of
/// the same class is below `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let clear = kept
            .iter()
            .filter(|k| k.class_id == d.class_id)
            .all(|k| iou(&k.bbox, &d.bbox) < iou_threshold);
        if clear {
            kept.push(*d);
        }
    }
    kept
}

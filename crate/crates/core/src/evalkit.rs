//! Synthetic shapes dataset, PPM and label I/O, and AP / mAP at a fixed IoU.
//!
//! Dataset layout: `images/NNNNN.ppm`, `labels/NNNNN.txt` (one `class cx cy
//! w h` line per object, normalized) and `manifest.txt` listing the pairs.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox, Detection, GroundTruthBox};
use crate::qtensor::{FloatTensor, TensorShape};
use crate::{Error, Result};

pub const SHAPE_CLASSES: [&str; 3] = ["circle", "square", "triangle"];

/// 8-bit interleaved RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::InvalidShape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let mut out = Self::filled(width, height, [0; 3]);
        for y in 0..height {
            let sy = y * self.height / height;
            for x in 0..width {
                out.set_pixel(x, y, self.pixel(x * self.width / width, sy));
            }
        }
        out
    }

    /// Planar `3 x H x W` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> FloatTensor {
        let plane = self.width * self.height;
        let mut v = vec![0f32; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                v[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        let shape = TensorShape {
            channels: 3,
            height: self.height,
            width: self.width,
        };
        FloatTensor::new(shape, v).expect("sizes agree")
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(_) => break,
                    None => return Err("unexpected end of header".into()),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err("not a binary PPM (P6)".into());
        }
        let mut num = |what: &str| -> std::result::Result<usize, String> {
            token()?.parse().map_err(|_| format!("bad {what}"))
        };
        let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
        if max != 255 {
            return Err(format!("maxval {max} unsupported, expected 255"));
        }
        // exactly one whitespace byte separates the header from the raster
        let start = pos + 1;
        let need = w * h * 3;
        let raster = bytes
            .get(start..start + need)
            .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
        Self::new(w, h, raster.to_vec()).map_err(|e| e.to_string())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|detail| Error::Malformed {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    /// 1-pixel outline of a normalized box, clipped to the image.
    pub fn draw_box(&mut self, b: &BBox, rgb: [u8; 3]) {
        let (x0, y0, x1, y1) = b.corners();
        let px = |v: f32, n: usize| ((v * n as f32).floor().max(0.0) as usize).min(n - 1);
        let (x0, x1) = (px(x0, self.width), px(x1, self.width));
        let (y0, y1) = (px(y0, self.height), px(y1, self.height));
        for x in x0..=x1 {
            self.set_pixel(x, y0, rgb);
            self.set_pixel(x, y1, rgb);
        }
        for y in y0..=y1 {
            self.set_pixel(x0, y, rgb);
            self.set_pixel(x1, y, rgb);
        }
    }
}

pub fn class_color(class_id: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 6] = [
        [255, 64, 64],
        [64, 255, 64],
        [64, 128, 255],
        [255, 255, 0],
        [255, 0, 255],
        [0, 255, 255],
    ];
    PALETTE[class_id % PALETTE.len()]
}

pub fn format_labels(boxes: &[GroundTruthBox]) -> String {
    boxes
        .iter()
        .map(|g| format!("{} {:.6} {:.6} {:.6} {:.6}\n", g.class_id, g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h))
        .collect()
}

fn parse_fields<const N: usize>(line: &str) -> Option<[f32; N]> {
    let mut out = [0f32; N];
    let mut it = line.split_whitespace();
    for v in &mut out {
        *v = it.next()?.parse().ok().filter(|x: &f32| x.is_finite())?;
    }
    it.next().is_none().then_some(out)
}

fn class_field(v: f32) -> Option<usize> {
    (v >= 0.0 && v.fract() == 0.0).then_some(v as usize)
}

/// Parses `class cx cy w h` lines. `path` only names the file in errors.
pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<GroundTruthBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |why: &str| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("line {}: {why}: `{line}`", n + 1),
            };
            let [c, cx, cy, w, h] = parse_fields::<5>(line).ok_or_else(|| bad("expected `class cx cy w h`"))?;
            let class_id = class_field(c).ok_or_else(|| bad("class must be a non-negative integer"))?;
            if !(w > 0.0 && h > 0.0) || [cx, cy, w, h].iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(bad("box must be normalized with positive size"));
            }
            Ok(GroundTruthBox {
                class_id,
                bbox: BBox::new(cx, cy, w, h),
            })
        })
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<GroundTruthBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path)
}

/// Detection files hold `class score cx cy w h` lines.
pub fn format_detections(dets: &[Detection]) -> String {
    dets.iter()
        .map(|d| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6} {:.6}\n",
                d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
            )
        })
        .collect()
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let [c, score, cx, cy, w, h] = parse_fields::<6>(line)
                .filter(|f| class_field(f[0]).is_some())
                .ok_or_else(|| Error::Malformed {
                    path: path.to_path_buf(),
                    detail: format!("line {}: expected `class score cx cy w h`: `{line}`", n + 1),
                })?;
            Ok(Detection {
                class_id: c as usize,
                score,
                bbox: BBox::new(cx, cy, w, h),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_path: PathBuf,
    pub ground_truths: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub labels: PathBuf,
}

pub const MANIFEST: &str = "manifest.txt";

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| match line.split_whitespace().collect::<Vec<_>>()[..] {
            [image, labels] => Ok(ManifestEntry {
                image: image.into(),
                labels: labels.into(),
            }),
            _ => Err(Error::Malformed {
                path: path.clone(),
                detail: format!("line {}: expected `image labels`", n + 1),
            }),
        })
        .collect()
}

/// Reads the manifest and every label file it names.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .into_iter()
        .map(|e| {
            Ok(LabeledImage {
                ground_truths: read_labels(dir.join(&e.labels))?,
                image_path: dir.join(e.image),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class_id: usize,
    // pixel-space bounds
    x0: f32,
    y0: f32,
    size: f32,
}

impl Shape {
    fn contains(&self, px: f32, py: f32) -> bool {
        let (u, v) = ((px - self.x0) / self.size, (py - self.y0) / self.size);
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return false;
        }
        match self.class_id {
            0 => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            1 => true,
            // apex at top centre, base along the bottom edge
            _ => (u - 0.5).abs() <= v / 2.0,
        }
    }

    fn overlaps(&self, o: &Shape) -> bool {
        self.x0 < o.x0 + o.size && o.x0 < self.x0 + self.size && self.y0 < o.y0 + o.size && o.y0 < self.y0 + self.size
    }

    fn label(&self, image_size: usize) -> GroundTruthBox {
        let n = image_size as f32;
        let s = self.size / n;
        GroundTruthBox {
            class_id: self.class_id,
            bbox: BBox::new(self.x0 / n + s / 2.0, self.y0 / n + s / 2.0, s, s),
        }
    }
}

/// Renders one image and its exact labels.
pub fn render_shapes_image(rng: &mut ChaCha8Rng, image_size: usize) -> (RgbImage, Vec<GroundTruthBox>) {
    let n = image_size as f32;
    let base: [i32; 3] = std::array::from_fn(|_| rng.gen_range(0..96));
    let mut img = RgbImage::filled(image_size, image_size, [0; 3]);
    for y in 0..image_size {
        for x in 0..image_size {
            let px = std::array::from_fn(|c| (base[c] + rng.gen_range(-24..=24)).clamp(0, 255) as u8);
            img.set_pixel(x, y, px);
        }
    }
    let count = rng.gen_range(1..=4);
    let mut shapes: Vec<Shape> = Vec::new();
    for _ in 0..count {
        // rejection-sample a placement that overlaps nothing placed so far
        for _ in 0..64 {
            let size = rng.gen_range((0.12 * n).max(6.0)..=0.4 * n).round();
            let s = Shape {
                class_id: rng.gen_range(0..SHAPE_CLASSES.len()),
                x0: rng.gen_range(0..=(n - size) as usize) as f32,
                y0: rng.gen_range(0..=(n - size) as usize) as f32,
                size,
            };
            if shapes.iter().all(|o| !s.overlaps(o)) {
                shapes.push(s);
                break;
            }
        }
    }
    for s in &shapes {
        let color: [u8; 3] = std::array::from_fn(|_| rng.gen_range(140..=255));
        let (x0, y0) = (s.x0 as usize, s.y0 as usize);
        let end = |v: f32| ((v + s.size) as usize).min(image_size);
        for y in y0..end(s.y0) {
            for x in x0..end(s.x0) {
                if s.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    img.set_pixel(x, y, color);
                }
            }
        }
    }
    let labels = shapes.iter().map(|s| s.label(image_size)).collect();
    (img, labels)
}

/// Writes `n` images with 1-4 non-overlapping shapes each. Output is a pure
/// function of `(n, seed, image_size)`.
pub fn generate_shapes_dataset(n: usize, seed: u64, image_size: usize, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    if n == 0 || image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "need n >= 1 and image size >= 16, got n = {n}, size = {image_size}"
        )));
    }
    let dir = out_dir.as_ref();
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (img, labels) = render_shapes_image(&mut rng, image_size);
        let entry = ManifestEntry {
            image: format!("images/{i:05}.ppm").into(),
            labels: format!("labels/{i:05}.txt").into(),
        };
        img.write(dir.join(&entry.image))?;
        let lp = dir.join(&entry.labels);
        fs::write(&lp, format_labels(&labels)).map_err(|e| Error::io(&lp, e))?;
        manifest.push_str(&format!("{} {}\n", entry.image.display(), entry.labels.display()));
        entries.push(entry);
    }
    let mp = dir.join(MANIFEST);
    fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
    Ok(entries)
}

/// One scored box of a single class, tagged with its image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f32,
    pub bbox: BBox,
}

fn box_key(b: &BBox) -> [f32; 4] {
    [b.cx, b.cy, b.w, b.h]
}

/// Score descending, then box coordinates, so the order never depends on
/// how the detections were listed.
fn rank(a: &ScoredBox, b: &ScoredBox) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image.cmp(&b.image))
        .then_with(|| {
            box_key(&a.bbox)
                .iter()
                .zip(box_key(&b.bbox))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Greedy matching in rank order: each detection claims the unmatched
/// ground truth of its image with the highest IoU at or above the
/// threshold (lowest index on ties). Returns the ranked detections and
/// whether each one is a true positive.
pub fn match_detections(dets: &[ScoredBox], gts: &[(usize, BBox)], iou_threshold: f32) -> Vec<(ScoredBox, bool)> {
    let mut ranked = dets.to_vec();
    ranked.sort_by(rank);
    let mut taken = vec![false; gts.len()];
    ranked
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f32)> = None;
            for (k, (img, g)) in gts.iter().enumerate() {
                if *img != d.image || taken[k] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            if let Some((k, _)) = best {
                taken[k] = true;
            }
            (d, best.is_some())
        })
        .collect()
}

/// All-point interpolated AP for one class. Precision and recall are read
/// only after each group of equal scores, so tied detections act as one
/// threshold. Returns 0 when there are no ground truths.
pub fn average_precision(dets: &[ScoredBox], gts: &[(usize, BBox)], iou_threshold: f32) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    ap_from_matches(&match_detections(dets, gts, iou_threshold), gts.len())
}

/// AP of ranked match outcomes against `num_gt` ground truths.
pub fn ap_from_matches(matched: &[(ScoredBox, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (i, (d, hit)) in matched.iter().enumerate() {
        tp += *hit as usize;
        seen += 1;
        let group_ends = matched.get(i + 1).is_none_or(|(n, _)| n.score != d.score);
        if group_ends {
            points.push((tp as f64 / num_gt as f64, tp as f64 / seen as f64));
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev_recall) * envelope;
        prev_recall = r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub ground_truths: usize,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f32,
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with at least one ground truth; 0 if none has.
    pub map: f64,
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truths: Vec<GroundTruthBox>,
}

pub fn map_eval(images: &[ImageResult], num_classes: usize, iou_threshold: f32) -> Result<EvalReport> {
    let mut dets = vec![Vec::new(); num_classes];
    let mut gts = vec![Vec::new(); num_classes];
    for (image, r) in images.iter().enumerate() {
        for d in &r.detections {
            let slot = dets.get_mut(d.class_id).ok_or_else(|| {
                Error::InvalidArgument(format!("detection class {} outside 0..{num_classes}", d.class_id))
            })?;
            slot.push(ScoredBox {
                image,
                score: d.score,
                bbox: d.bbox,
            });
        }
        for g in &r.ground_truths {
            let slot = gts.get_mut(g.class_id).ok_or_else(|| {
                Error::InvalidArgument(format!("ground-truth class {} outside 0..{num_classes}", g.class_id))
            })?;
            slot.push((image, g.bbox));
        }
    }
    let classes: Vec<ClassReport> = (0..num_classes)
        .map(|c| {
            let tp = match_detections(&dets[c], &gts[c], iou_threshold).iter().filter(|m| m.1).count();
            ClassReport {
                class_id: c,
                ground_truths: gts[c].len(),
                ap: average_precision(&dets[c], &gts[c], iou_threshold),
                tp,
                fp: dets[c].len() - tp,
                fn_: gts[c].len() - tp,
            }
        })
        .collect();
    let scored: Vec<f64> = classes.iter().filter(|c| c.ground_truths > 0).map(|c| c.ap).collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(EvalReport {
        iou_threshold,
        classes,
        map,
    })
}

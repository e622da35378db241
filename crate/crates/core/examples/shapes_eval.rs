//! Renders a shapes dataset to disk and scores three detectors on it: the
//! ground truth itself, the truth with spurious boxes added, and a random
//! network.

use seyolo::cli::detect_in_image;
use seyolo::detect::{BBox, Detection};
use seyolo::evalkit::{generate_shapes_dataset, load_dataset, map_eval, EvalReport, ImageResult, RgbImage};
use seyolo::graph::{build_squeezed_edge_yolo, Model, NetConfig};
use seyolo::modelio::init_random_weights;

fn show(name: &str, r: &EvalReport) {
    let per_class: Vec<String> = r.classes.iter().map(|c| format!("{:.3}", c.ap)).collect();
    println!("{name:<24} mAP {:.4}  per class [{}]", r.map, per_class.join(", "));
}

fn main() -> seyolo::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    generate_shapes_dataset(60, 11, 128, dir.path())?;
    let data = load_dataset(dir.path())?;
    let objects: usize = data.iter().map(|d| d.ground_truths.len()).sum();
    println!("{} images, {objects} objects in {}", data.len(), dir.path().display());

    let oracle: Vec<ImageResult> = data
        .iter()
        .map(|d| ImageResult {
            detections: d
                .ground_truths
                .iter()
                .map(|g| Detection { class_id: g.class_id, score: 1.0, bbox: g.bbox })
                .collect(),
            ground_truths: d.ground_truths.clone(),
        })
        .collect();
    show("oracle", &map_eval(&oracle, 3, 0.5)?);

    // confident false positives in an empty corner
    let noisy: Vec<ImageResult> = oracle
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.detections.push(Detection { class_id: 0, score: 1.0, bbox: BBox::new(0.02, 0.02, 0.03, 0.03) });
            r
        })
        .collect();
    show("oracle + 1 FP per image", &map_eval(&noisy, 3, 0.5)?);

    let g = build_squeezed_edge_yolo(NetConfig::default())?;
    let model = Model::Float(init_random_weights(&g, 3));
    let random = data
        .iter()
        .map(|d| {
            Ok(ImageResult {
                detections: detect_in_image(&model, &RgbImage::read(&d.image_path)?, 0.25, 0.45)?,
                ground_truths: d.ground_truths.clone(),
            })
        })
        .collect::<seyolo::Result<Vec<_>>>()?;
    show("untrained network", &map_eval(&random, 3, 0.5)?);
    Ok(())
}

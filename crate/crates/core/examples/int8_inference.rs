//! Float and int8 detection on rendered images, with an annotated PPM and
//! the detection-count agreement between the two paths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seyolo::cli::detect_in_image;
use seyolo::evalkit::{class_color, render_shapes_image, SHAPE_CLASSES};
use seyolo::graph::{build_squeezed_edge_yolo, quantize_model, Model, NetConfig};
use seyolo::modelio::{calibrate_objectness, init_random_weights};

fn main() -> seyolo::Result<()> {
    let g = build_squeezed_edge_yolo(NetConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let rendered: Vec<_> = (0..32).map(|_| render_shapes_image(&mut rng, 128)).collect();
    let objects = rendered.iter().map(|(_, gt)| gt.len()).sum::<usize>() as f64 / 32.0;
    let calib: Vec<_> = rendered.iter().map(|(img, _)| img.to_tensor()).collect();

    let mut float = init_random_weights(&g, 1);
    calibrate_objectness(&mut float, &calib, objects, 0.25, 0.45)?;
    let int8 = Model::Int8(quantize_model(&float, &float.collect_ranges(&calib)?)?);
    let float = Model::Float(float);

    let (mut image, truth) = render_shapes_image(&mut rng, 128);
    println!("ground truth:");
    for t in &truth {
        println!("  {:<8} at ({:.3}, {:.3}) size {:.3}", SHAPE_CLASSES[t.class_id], t.bbox.cx, t.bbox.cy, t.bbox.w);
    }
    for model in [&float, &int8] {
        let dets = detect_in_image(model, &image, 0.25, 0.45)?;
        println!("{} detections:", model.mode());
        for d in &dets {
            println!("  class {} score {:.3} at ({:.3}, {:.3}) {:.3}x{:.3}", d.class_id, d.score, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h);
        }
    }
    for d in detect_in_image(&int8, &image, 0.25, 0.45)? {
        image.draw_box(&d.bbox, class_color(d.class_id));
    }
    let out = std::env::temp_dir().join("seyolo_int8_inference.ppm");
    image.write(&out)?;
    println!("annotated image: {}", out.display());

    let mut same = 0;
    let n = 50;
    for _ in 0..n {
        let img = render_shapes_image(&mut rng, 128).0;
        let a = detect_in_image(&float, &img, 0.25, 0.45)?.len();
        let b = detect_in_image(&int8, &img, 0.25, 0.45)?.len();
        same += usize::from(a == b);
    }
    println!("same detection count on {same} of {n} images");
    Ok(())
}

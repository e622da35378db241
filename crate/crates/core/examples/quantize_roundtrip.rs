//! Post-training quantization of seeded random weights on rendered shapes
//! images, with the per-layer error of the int8 network against float.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seyolo::evalkit::render_shapes_image;
use seyolo::graph::{build_squeezed_edge_yolo, layer_errors, quantize_model, NetConfig};
use seyolo::modelio::{calibrate_objectness, init_random_weights};

fn main() -> seyolo::Result<()> {
    let g = build_squeezed_edge_yolo(NetConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let rendered: Vec<_> = (0..32).map(|_| render_shapes_image(&mut rng, 128)).collect();
    let objects = rendered.iter().map(|(_, gt)| gt.len()).sum::<usize>() as f64 / rendered.len() as f64;
    let calib: Vec<_> = rendered.iter().map(|(img, _)| img.to_tensor()).collect();

    let mut float = init_random_weights(&g, 1);
    let bias = calibrate_objectness(&mut float, &calib, objects, 0.25, 0.45)?;
    println!("objectness bias {bias:.3} gives {objects:.2} detections per image on average");

    let ranges = float.collect_ranges(&calib)?;
    println!("{} activation ranges recorded", ranges.len());
    let quant = quantize_model(&float, &ranges)?;
    println!("input: {:?}", quant.input_qparams());

    let test = render_shapes_image(&mut rng, 128).0.to_tensor();
    let errors = layer_errors(&float, &quant, &test)?;
    for e in &errors {
        println!("{:<14} mae {:.3e}  step {:.3e}  {:.2} steps", e.label, e.mae, e.scale, e.in_steps());
    }
    let worst = errors.iter().map(|e| e.in_steps()).fold(0.0, f32::max);
    println!("worst layer error: {worst:.2} output steps");
    Ok(())
}

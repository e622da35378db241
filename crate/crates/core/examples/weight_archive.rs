//! Writes a float and an int8 SEYW archive, lists their records and shows
//! how a mismatched graph is rejected.

use seyolo::evalkit::RgbImage;
use seyolo::graph::{build_squeezed_edge_yolo, quantize_model, Model, NetConfig};
use seyolo::kernels::Exec;
use seyolo::modelio::{init_random_weights, load_weights, read_archive, save_weights, TensorData};

fn main() -> seyolo::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let g = build_squeezed_edge_yolo(NetConfig::default())?;
    let float = init_random_weights(&g, 7);

    let calib: Vec<_> = (0..4)
        .map(|k| RgbImage::filled(128, 128, [40 * k as u8 + 60, 90, 200 - 30 * k as u8]).to_tensor())
        .collect();
    let quant = quantize_model(&float, &float.collect_ranges(&calib)?)?;

    for (name, model) in [("float", Model::Float(float)), ("int8", Model::Int8(quant))] {
        let path = dir.path().join(format!("{name}.seyw"));
        save_weights(&model, &path)?;
        let archive = read_archive(&path)?;
        let file = std::fs::metadata(&path).expect("just written").len();
        println!(
            "{name}: {} records, {} payload bytes, {} file bytes ({:.3}% overhead)",
            archive.tensors.len(),
            archive.payload_bytes(),
            file,
            100.0 * (file as f64 - archive.payload_bytes() as f64) / archive.payload_bytes() as f64
        );
        for t in archive.tensors.iter().take(3) {
            let q = match &t.data {
                TensorData::I8 { qparams, .. } => format!(" ({} scales)", qparams.len()),
                _ => String::new(),
            };
            println!("    {:<28} {:>4} {:?}{q}", t.name, t.data.dtype_name(), t.dims);
        }

        // reload and compare outputs bit for bit
        let back = load_weights(&path, &g)?;
        let x = &calib[0];
        assert_eq!(back.infer(x, Exec::Sequential)?, model.infer(x, Exec::Sequential)?);
    }

    let other = build_squeezed_edge_yolo(NetConfig::default().with_classes(1))?;
    match load_weights(dir.path().join("float.seyw"), &other) {
        Err(e) => println!("1-class graph: {e}"),
        Ok(_) => unreachable!("class count differs"),
    }
    Ok(())
}

//! Layer table of the default network plus the size of the scaled variants.

use seyolo::graph::{build_squeezed_edge_yolo, scale_model, NeckWidthSource, NetConfig};

fn main() -> seyolo::Result<()> {
    let g = build_squeezed_edge_yolo(NetConfig::default())?;
    let shapes = g.infer_shapes()?;
    let params = g.layer_params(&shapes);
    for (i, node) in g.nodes().iter().enumerate() {
        let out = shapes.outputs[i].map_or_else(
            || shapes.heads.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" + "),
            |s| s.to_string(),
        );
        println!("{:<12} {:<9} {:<24} {:>8}", g.label(i), node.kind.name(), out, params[i]);
    }

    let total = g.param_count()?;
    println!("\n{total} parameters, {:.2} Mbit at 8 bits", total as f64 * 8.0 / 1e6);
    println!("{:.3} GOP per 128x128 inference", g.count_ops()? as f64 / 1e9);
    println!("YOLOv5s at 7.3M is {:.1}x larger", 7.3e6 / total as f64);

    // the other reading of the neck table
    let mut cfg = NetConfig::default();
    cfg.neck_width_source = NeckWidthSource::OutputColumn;
    println!("output-column neck widths: {} parameters", build_squeezed_edge_yolo(cfg)?.param_count()?);

    for factor in [2.0, 4.0] {
        let s = scale_model(&g, factor)?;
        let n = s.param_count()?;
        println!("{factor}x: {n} parameters ({:.2}x base)", n as f64 / total as f64);
    }
    Ok(())
}

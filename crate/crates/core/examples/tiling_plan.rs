//! Plans the base, 2x and 4x networks on the default hardware model after
//! calibrating the MAC rate to a 130 ms base-model latency.

use seyolo::graph::{build_squeezed_edge_yolo, scale_model, NetConfig};
use seyolo::memplan::{calibrate, emit_trace, footprint, plan_tiles, predict_latency, HardwareModel, Unit};

fn main() -> seyolo::Result<()> {
    let base = build_squeezed_edge_yolo(NetConfig::default())?;
    let fp = footprint(&base)?;
    println!(
        "weights {} B, input {} B, peak live activations {} B",
        fp.weight_bytes, fp.input_bytes, fp.peak_activation_bytes
    );

    let hw = calibrate(&HardwareModel::default(), &base, 130.0)?;
    println!("calibrated MAC rate: {:.4} per core-cycle", hw.effective_macs_per_core_cycle);

    for factor in [1.0, 2.0, 4.0] {
        let g = scale_model(&base, factor)?;
        let plan = plan_tiles(&g, &hw)?;
        let lat = predict_latency(&plan, &hw);
        let (_, summary) = emit_trace(&plan, &hw);
        println!(
            "{factor}x: {:>9} params  L3 {:>9} B  L2->L1 {:>9} B  {:>9.2} ms  {:>5.2} inf/s  \
             core0 {:.3}  CDMA {:.3}  MDMA {:.3}",
            g.param_count()?,
            plan.l3_traffic_bytes(),
            plan.l2_traffic_bytes(),
            lat.ms,
            lat.inferences_per_second(),
            summary.busy(Unit::Core(0)),
            summary.busy(Unit::Cdma),
            summary.busy(Unit::Mdma),
        );
        if factor == 1.0 {
            for l in plan.layers.iter().filter(|l| l.weight_level == seyolo::memplan::MemLevel::L3) {
                println!("    {} streams its weights from L3", l.label);
            }
        }
    }
    Ok(())
}

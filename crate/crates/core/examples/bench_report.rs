//! Throughput, energy and efficiency from measured latency and power, for
//! the Jetson rows of the comparison table.

use seyolo::cli::{bench_report, compare, BenchInputs};

fn main() -> seyolo::Result<()> {
    let baseline: BenchInputs = "latency_ms=231,cpu_mw=777,gpu_mw=3846,gops=198.2,published_gops_per_j=185.7".parse()?;
    let candidate: BenchInputs = "latency_ms=70,cpu_mw=1158,gpu_mw=2434,gops=94.3,published_gops_per_j=788.5".parse()?;

    let b = bench_report(&baseline, 0.0)?;
    let c = bench_report(&candidate, 0.0)?;
    for (name, r) in [("YOLOv5s", &b), ("Squeezed Edge YOLO", &c)] {
        println!(
            "{name:<20} {:>6.2} inf/s {:>8.1} mJ {:>7.1} GOPS {:>7.1} GOPS/J  published {:?} consistent {:?}",
            r.throughput,
            r.energy_per_inference_mj,
            r.performance_gops,
            r.energy_efficiency_gops_per_j,
            r.published_gops_per_j,
            r.published_consistent
        );
    }
    let cmp = compare(&b, &c);
    println!("{:.2}x faster, {:.1}% less energy per inference", cmp.speedup, cmp.energy_improvement_pct);

    // with a GOP count instead of measured GOPS
    let by_ops = BenchInputs { gop_per_inference: Some(47.2), performance_gops: None, ..baseline };
    let r = bench_report(&by_ops, 0.0)?;
    println!("47.2 GOP per inference: {:.1} GOPS, {:.1} GOPS/J", r.performance_gops, r.energy_efficiency_gops_per_j);
    Ok(())
}

//! Downlink traffic of the descriptor-free local graph against sending the
//! full local map, on the same 500-frame corridor walk.

use ecar::server::SyncMode;
use ecar::sim::runner::{run_scenario, RunConfig, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut means = Vec::new();
    for mode in [SyncMode::Ecar, SyncMode::Fullmap, SyncMode::KfVo] {
        let r = run_scenario(&RunConfig::new(mode, 1, Scenario::Corridor, 0))?.report;
        let down = r.mean_bytes_down.unwrap_or(0.0);
        println!(
            "{:8} mean down {:8.1} B, up {:8.1} B, latency {:.1} ms over {} syncs",
            mode.as_str(),
            down,
            r.mean_bytes_up.unwrap_or(0.0),
            r.mean_latency_us.unwrap_or(0.0) / 1e3,
            r.syncs
        );
        means.push(down);
    }
    println!("ecar / fullmap = {:.3}", means[0] / means[1]);
    Ok(())
}

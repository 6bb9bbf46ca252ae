//! Three devices drawing on the corridor floor: each registers a line,
//! drags it, and the others check that they received the latest version.

use ecar::server::SyncMode;
use ecar::sim::runner::{run_scenario, RunConfig, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = run_scenario(&RunConfig { frames: 240, ..RunConfig::new(SyncMode::Ecar, 3, Scenario::Drawing, 1) })?;
    for e in out.events.iter().filter(|e| e.kind != "sync") {
        println!("{:>9} us  device {}  {:<22} object {} v{}", e.t_us, e.device_id, e.kind, e.vo_id, e.version);
    }
    let r = &out.report;
    match r.vo_success_rate {
        Some(rate) => println!("{} interactions, {} checks, {:.0}% seen within two replies", r.interactions, r.vo_checks, 100.0 * rate),
        None => println!("{} interactions, no checks opened", r.interactions),
    }
    Ok(())
}

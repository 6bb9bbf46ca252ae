//! Sync latency as devices are added to a shared emulated Wi-Fi channel.
//! Pass device counts as arguments (default 1 5 10 20).

use ecar::server::SyncMode;
use ecar::sim::runner::{sweep, sweep_csv, RunConfig, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let devices: Vec<usize> = std::env::args().skip(1).map(|a| a.parse()).collect::<Result<_, _>>()?;
    let devices = if devices.is_empty() { vec![1, 5, 10, 20] } else { devices };
    let base = RunConfig { frames: 300, ..RunConfig::new(SyncMode::Ecar, 1, Scenario::Corridor, 0) };
    let rows = sweep(&base, &[SyncMode::Ecar, SyncMode::Fullmap], &devices)?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

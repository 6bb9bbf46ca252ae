//! Command-line entry point: simulation runs, sweeps, range tables and the
//! live HTTP server.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use ecar::server::{ConfigError, EdgeServer, ServerConfig, SyncMode};
use ecar::sim::range::{measure_vo_range, RangeConfig, RangeScenario};
use ecar::sim::runner::{run_scenario, sweep, sweep_csv, RunConfig, Scenario};
use ecar::sim::Scene;

#[derive(Parser)]
#[command(name = "ecar-sim", version, about = "Collaborative AR sync simulator and edge server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write report.json, frames.csv and events.csv.
    Run {
        #[arg(long, default_value = "ecar")]
        mode: SyncMode,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        #[arg(long, default_value = "corridor")]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        quality: u8,
        #[arg(long, default_value_t = 500)]
        frames: usize,
        /// Device keyframe queue length.
        #[arg(long, default_value_t = 10)]
        queue_len: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Latency and traffic against device count, as CSV.
    Sweep {
        /// Comma-separated modes.
        #[arg(long, default_value = "ecar,fullmap", value_delimiter = ',')]
        mode: Vec<SyncMode>,
        /// `a..b` (inclusive) or a comma-separated list.
        #[arg(long, default_value = "1..20")]
        devices: String,
        #[arg(long, default_value = "corridor")]
        scenario: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        quality: u8,
        #[arg(long, default_value_t = 300)]
        frames: usize,
        /// CSV path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Virtual-object sharing success against distance or viewing angle.
    Range {
        #[arg(long, default_value = "corridor", value_parser = parse_range_scenario)]
        scenario: RangeScenario,
        #[arg(long, default_value = "ecar,kfvo", value_delimiter = ',')]
        mode: Vec<SyncMode>,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Start the HTTP server.
    Serve {
        /// TOML or JSON server configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static UI assets.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        /// Synthetic scene used to map uploaded keypoints.
        #[arg(long, default_value = "corridor")]
        scene: Scenario,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_range_scenario(s: &str) -> Result<RangeScenario, String> {
    match s {
        "corridor" => Ok(RangeScenario::Corridor),
        "half_circle" => Ok(RangeScenario::HalfCircle),
        _ => Err(format!("unknown range scenario {s:?} (corridor or half_circle)")),
    }
}

fn parse_devices(s: &str) -> Result<Vec<usize>, ConfigError> {
    let bad = || ConfigError::new("devices", format!("cannot parse {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        return if a <= b { Ok((a..=b).collect()) } else { Err(bad()) };
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map(|v| format!("{:.4}", v * scale)).unwrap_or_else(|| "N/A".into())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { mode, devices, scenario, seed, quality, frames, queue_len, out } => {
            let base = RunConfig::new(mode, devices, scenario, seed);
            let client = ecar::ClientConfig { queue_len, ..base.client.clone() };
            let cfg = RunConfig { quality, frames, client, ..base };
            let output = run_scenario(&cfg)?;
            output.write(&out)?;
            let r = &output.report;
            println!("mode {} scenario {} devices {} seed {}", r.mode, r.scenario, r.devices, r.seed);
            println!("syncs {} lost syncs {} lost frames {}", r.syncs, r.lost_syncs, r.lost_frames);
            println!("mean bytes down {} up {}", fmt_opt(r.mean_bytes_down, 1.0), fmt_opt(r.mean_bytes_up, 1.0));
            println!("latency ms mean {} p95 {}", fmt_opt(r.mean_latency_us, 1e-3), fmt_opt(r.p95_latency_us, 1e-3));
            println!(
                "ATE device/gt {} device/server {} tracking/server {} server/gt {}",
                fmt_opt(r.ate_device_gt, 1.0),
                fmt_opt(r.ate_device_server, 1.0),
                fmt_opt(r.ate_tracking_server, 1.0),
                fmt_opt(r.ate_server_gt, 1.0)
            );
            println!("VO success {} over {} checks", fmt_opt(r.vo_success_rate, 100.0), r.vo_checks);
            println!("wrote {}", out.display());
        }
        Command::Sweep { mode, devices, scenario, seed, quality, frames, out } => {
            let base = RunConfig { quality, frames, ..RunConfig::new(SyncMode::Ecar, 1, scenario, seed) };
            let rows = sweep(&base, &mode, &parse_devices(&devices)?)?;
            let text = sweep_csv(&rows);
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Range { scenario, mode, trials, seed } => {
            let cfg = RangeConfig { trials, seed, ..RangeConfig::for_scenario(scenario) };
            let unit = if scenario == RangeScenario::Corridor { "distance_m" } else { "angle_deg" };
            println!("mode,{unit},trials,success_pct");
            for m in mode {
                for row in measure_vo_range(scenario, m, &cfg) {
                    println!("{m},{},{},{:.1}", row.station, row.trials, 100.0 * row.rate());
                }
            }
        }
        Command::Serve { config, addr, static_dir, scene, seed } => {
            let cfg = match config {
                Some(path) => ServerConfig::load(&path)?,
                None => ServerConfig::default(),
            }
            .with_env_overrides()?;
            let oracle = Arc::new(match scene {
                Scenario::Corridor | Scenario::Drawing => Scene::corridor(seed),
                Scenario::HalfCircle => Scene::half_circle_room(seed),
                Scenario::Static => Scene::static_room(seed),
            });
            let server = Arc::new(EdgeServer::new(cfg)?.with_oracle(oracle));
            eprintln!("listening on http://{addr} (mode {})", server.mode());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(ecar::http::serve(addr, server, static_dir))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn device_lists() {
        assert_eq!(parse_devices("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_devices("1,5,20").unwrap(), vec![1, 5, 20]);
        assert!(parse_devices("5..1").is_err());
        assert!(parse_devices("x").is_err());
    }
}

//! Acceptance runner: one line per criterion, non-zero exit on any failure.
//!
//! Criteria run one after another so that each wall-clock budget measures
//! that criterion alone.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ecar::server::SyncMode;
use ecar::sim::range::{measure_vo_range, relocation_trial, RangeConfig, RangeScenario};
use ecar::sim::runner::{run_scenario, sweep, RunConfig, Scenario};
use ecar::sim::SynthConfig;
use proptest::test_runner::{Config, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(budget: Duration, elapsed: Duration, o: Outcome) -> Outcome {
    if elapsed <= budget {
        o
    } else {
        outcome(false, format!("{}; over the {budget:?} budget", o.detail))
    }
}

fn traffic_ratio() -> Outcome {
    let run = |mode| {
        let cfg = RunConfig { frames: 500, ..RunConfig::new(mode, 1, Scenario::Corridor, 0) };
        run_scenario(&cfg).expect("valid config").report.mean_bytes_down.unwrap_or(f64::NAN)
    };
    let (ecar, full) = (run(SyncMode::Ecar), run(SyncMode::Fullmap));
    let ratio = ecar / full;
    outcome(ratio <= 0.30, format!("ecar {ecar:.1} B, fullmap {full:.1} B, ratio {ratio:.3} (limit 0.30)"))
}

fn latency_scaling() -> Outcome {
    let base = RunConfig { frames: 300, ..RunConfig::new(SyncMode::Ecar, 1, Scenario::Corridor, 0) };
    let rows = sweep(&base, &[SyncMode::Ecar, SyncMode::Fullmap], &[1, 5, 10, 20]).expect("valid config");
    let mean = |mode, n| {
        rows.iter().find(|r| r.mode == mode && r.devices == n).and_then(|r| r.mean_latency_us).unwrap_or(f64::NAN)
    };
    let growth = |mode| mean(mode, 20) / mean(mode, 1);
    let (e, f) = (growth(SyncMode::Ecar), growth(SyncMode::Fullmap));
    let curve: Vec<String> = [1, 5, 10, 20]
        .iter()
        .map(|&n| format!("{n}:{:.1}/{:.1}", mean(SyncMode::Ecar, n) / 1e3, mean(SyncMode::Fullmap, n) / 1e3))
        .collect();
    outcome(
        e <= f && e <= 1.5,
        format!("growth ecar {e:.3}, fullmap {f:.3}; mean ms ecar/fullmap {}", curve.join(" ")),
    )
}

fn range_table(scenario: RangeScenario) -> Outcome {
    let cfg = RangeConfig::for_scenario(scenario);
    let ecar = measure_vo_range(scenario, SyncMode::Ecar, &cfg);
    let kfvo = measure_vo_range(scenario, SyncMode::KfVo, &cfg);
    let worst_ecar = ecar.iter().map(|r| r.rate()).fold(f64::INFINITY, f64::min);
    let (far, far_label) = match scenario {
        RangeScenario::Corridor => (15.0, "≥ 15 m"),
        RangeScenario::HalfCircle => (120.0 + 1e-9, "> 120°"),
    };
    let far_rows: Vec<_> = kfvo.iter().filter(|r| r.station >= far).collect();
    let worst_kfvo = far_rows.iter().map(|r| r.rate()).fold(0.0, f64::max);
    let pass = worst_ecar >= 0.99 && !far_rows.is_empty() && worst_kfvo < 0.5;
    let kfvo_curve: Vec<String> = kfvo.iter().map(|r| format!("{}:{:.0}", r.station, 100.0 * r.rate())).collect();
    outcome(
        pass,
        format!(
            "ecar min {:.0}%, kfvo max {:.0}% at {far_label}; kfvo % {}",
            100.0 * worst_ecar,
            100.0 * worst_kfvo,
            kfvo_curve.join(" ")
        ),
    )
}

fn consistency() -> Outcome {
    let base = RunConfig::new(SyncMode::Ecar, 1, Scenario::Corridor, 0);
    let cfg = RunConfig { synth: SynthConfig { noise_base_px: 0.5, noise_slope_px: 0.0, ..base.synth }, ..base };
    let r = run_scenario(&cfg).expect("valid config").report;
    let ate = r.ate_device_server.unwrap_or(f64::INFINITY);
    outcome(
        ate <= 0.005,
        format!(
            "device/server ATE {ate:.5} (limit 0.005); tracking/server {:.5}, server/gt {:.5}",
            r.ate_tracking_server.unwrap_or(f64::NAN),
            r.ate_server_gt.unwrap_or(f64::NAN)
        ),
    )
}

fn quality_robustness() -> Outcome {
    let ate = |quality| {
        let cfg = RunConfig { quality, frames: 300, ..RunConfig::new(SyncMode::Ecar, 1, Scenario::Static, 0) };
        run_scenario(&cfg).expect("valid config").report.ate_server_gt.unwrap_or(f64::INFINITY)
    };
    let qualities: Vec<u8> = (1..=10).rev().map(|q| q * 10).collect();
    let ates: Vec<f64> = qualities.iter().map(|&q| ate(q)).collect();
    let limit = 2.0 * ates[0];
    let pass = ates.iter().all(|&a| a <= limit);
    let row: Vec<String> = qualities.iter().zip(&ates).map(|(q, a)| format!("{q}:{a:.4}")).collect();
    outcome(pass, format!("server ATE by quality {} (limit {limit:.4})", row.join(" ")))
}

fn relocation() -> Outcome {
    let ecar = relocation_trial(SyncMode::Ecar, 0, 2);
    let kfvo = relocation_trial(SyncMode::KfVo, 0, 10);
    let ecar_round = ecar.as_ref().and_then(|o| o.rendered_at_round);
    let kfvo_round = kfvo.as_ref().and_then(|o| o.rendered_at_round);
    let pass = ecar_round.is_some_and(|r| r <= 2) && kfvo.is_some() && kfvo_round.is_none();
    outcome(pass, format!("ecar rendered at round {ecar_round:?}; kfvo over 10 rounds {kfvo_round:?}"))
}

fn invariants() -> Outcome {
    let mut failures = Vec::new();
    let mut run = |name: &str, result: Result<(), String>| {
        if let Err(e) = result {
            failures.push(format!("{name}: {e}"));
        }
    };
    let runner = |cases| TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    run("codec", runner(10_000).run(&common::envelope(), |e| common::check_codec(&e)).map_err(|e| e.to_string()));
    run(
        "graph",
        runner(256)
            .run(&(common::graph_ops(500, 120), 1u32..20), |(ops, th)| common::check_graph_ops(&ops, th, 50))
            .map_err(|e| e.to_string()),
    );
    run(
        "jacobian",
        runner(2_000).run(&common::camera_and_point(), |(p, x)| common::check_jacobian(&p, &x)).map_err(|e| e.to_string()),
    );
    run(
        "ray-plane",
        runner(2_000).run(&common::ray_and_plane(), |(r, p)| common::check_ray_plane(&r, &p)).map_err(|e| e.to_string()),
    );
    run(
        "cell",
        runner(2_000)
            .run(&(proptest::array::uniform3(-1e3f64..1e3), 0.01f64..2.0), |(p, c)| {
                common::check_cell_of(&ecar::Vec3::from(p), c)
            })
            .map_err(|e| e.to_string()),
    );
    let det = || {
        let cfg = RunConfig { frames: 120, ..RunConfig::new(SyncMode::Ecar, 3, Scenario::Drawing, 7) };
        let out = run_scenario(&cfg).expect("valid config");
        (out.frames_csv(), out.events_csv())
    };
    run("determinism", if det() == det() { Ok(()) } else { Err("CSV differs between identical runs".into()) });
    if failures.is_empty() {
        outcome(true, "codec 10^4 cases, graph recount, jacobian, ray-plane, cell bounds, determinism")
    } else {
        outcome(false, failures.join("; "))
    }
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, u64, Check); 8] = [
        ("traffic ratio", 30, traffic_ratio),
        ("latency scaling", 300, latency_scaling),
        ("distance range", 60, || range_table(RangeScenario::Corridor)),
        ("angle range", 60, || range_table(RangeScenario::HalfCircle)),
        ("device-server consistency", 60, consistency),
        ("quality robustness", 600, quality_robustness),
        ("VO relocation", 600, relocation),
        ("invariant suites", 600, invariants),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let o = within(Duration::from_secs(budget), elapsed, o);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {} {verdict} {name} ({:.1} s): {}", i + 1, elapsed.as_secs_f64(), o.detail);
        failed += usize::from(!o.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! Deterministic experiment harness: synthetic scenes and camera paths, a
//! shared-channel emulator and runners for the traffic, latency, accuracy
//! and virtual-object range experiments.

pub mod channel;
pub mod metrics;
pub mod range;
pub mod runner;
pub mod scene;
pub mod synth;
pub mod trajectory;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use channel::{ChannelModel, PsLink};
pub use metrics::{compute_ate, MetricsError};
pub use range::{measure_vo_range, relocation_trial, RangeConfig, RangeRow, RangeScenario, RelocationOutcome};
pub use runner::{run_scenario, sweep, RunConfig, RunOutput, RunReport, Scenario, SweepRow};
pub use scene::Scene;
pub use synth::{synthesize_frame, OctaveModel, SynthConfig};
pub use trajectory::{Trajectory, TrajectoryKind};

/// Independent random stream `stream` derived from a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for per-device, per-frame randomness.
pub(crate) fn frame_stream(device: u32, frame: usize) -> u64 {
    ((device as u64) << 32) | frame as u64
}

//! How far (and from which angle) a virtual object stays shareable.
//!
//! A registrant maps its surroundings and places an object; an observer then
//! appears at each station, syncs twice, and counts as a success if the
//! object reached its visible set. Stations are independent: each starts
//! from a fork of the server state right after registration.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientConfig, DeviceClient, TouchResult};
use crate::geometry::Pose;
use crate::graph::VirtualLine;
use crate::protocol::{self, InteractionMessage};
use crate::server::{EdgeServer, ServerConfig, SyncMode};
use crate::sim::scene::{Scene, FLOOR_Y};
use crate::sim::synth::{synthesize_frame, OctaveModel, SynthConfig};
use crate::sim::trajectory::Trajectory;
use crate::sim::{frame_stream, stream_rng};
use crate::{DeviceId, Vec3, VoId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeScenario {
    /// Object on the origin end wall, observer backing away down the corridor.
    Corridor,
    /// Object on the floor at the orbit center, observer walking the arc.
    HalfCircle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeConfig {
    pub trials: usize,
    pub seed: u64,
    pub quality: u8,
    pub synth: SynthConfig,
    /// Server settings shared by every mode; the mode is set per run.
    pub server: ServerConfig,
    /// Sync rounds the observer gets at each station.
    pub rounds: usize,
}

impl RangeConfig {
    /// Defaults per scenario. Seeing a 10 cm cell 30 m away takes a ray
    /// length beyond 30 m and a one-pixel sampling lattice.
    pub fn for_scenario(scenario: RangeScenario) -> Self {
        let server = match scenario {
            RangeScenario::Corridor => ServerConfig { th_dist: 40.0, sample_window: 1, ..ServerConfig::default() },
            RangeScenario::HalfCircle => ServerConfig::default(),
        };
        Self {
            trials: 10,
            seed: 0,
            quality: 100,
            synth: SynthConfig { octave: OctaveModel::DepthScaled { ref_depth: 8.0 }, ..SynthConfig::default() },
            server,
            rounds: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRow {
    /// Meters (corridor) or degrees (half circle).
    pub station: f64,
    pub trials: usize,
    pub successes: usize,
}

impl RangeRow {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

pub const CORRIDOR_STATIONS_M: std::ops::RangeInclusive<u32> = 1..=30;
pub const ARC_STATIONS_DEG: [f64; 19] =
    [0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0, 130.0, 140.0, 150.0, 160.0, 170.0, 180.0];

const REGISTRANT: DeviceId = 1;
const OBSERVER: DeviceId = 2;
const ARC_RADIUS: f64 = 2.0;
const EYE_HEIGHT: f64 = 1.5;
/// Target on the origin end wall.
const WALL_TARGET: Vec3 = Vec3::new(0.0, 1.2, -0.05);

/// One device plus the bookkeeping to drive it frame by frame.
struct Actor {
    client: DeviceClient,
    frame: usize,
}

impl Actor {
    fn new(server: &EdgeServer, id: DeviceId, start: &Pose, quality: u8) -> Self {
        server.register_device(id, Some(*start));
        let cfg = ClientConfig { quality, ..ClientConfig::default() };
        Self { client: DeviceClient::new(id, cfg).expect("default client config"), frame: 0 }
    }

    /// Track, upload and apply the reply for one frame at `pose`.
    fn sync(&mut self, server: &EdgeServer, scene: &Scene, pose: &Pose, cfg: &RangeConfig, trial: u64) {
        let id = self.client.device_id();
        let mut rng = stream_rng(cfg.seed ^ trial.wrapping_mul(0x9e37_79b9), frame_stream(id, self.frame));
        let kps = synthesize_frame(scene, pose, &cfg.synth, cfg.quality, &mut rng);
        self.client.track_frame(&kps);
        let env = self.client.make_upload(self.frame as u64, self.frame as u64 * 33_333, &kps);
        self.frame += 1;
        let bytes = protocol::encode(&env).expect("valid upload");
        let reply = server.handle_message(&bytes).expect("registered device");
        self.client.apply_message(&reply).expect("reply matches upload");
    }

    fn sees(&self, vo: VoId, version: u32) -> bool {
        self.client.local_graph().visible_vos().get(&vo).map_or(false, |v| v.version >= version)
    }
}

fn line_payload(at: &Vec3) -> Vec<u8> {
    VirtualLine { start: *at, end: at + Vec3::new(0.1, 0.0, 0.0), rgb: [230, 60, 40], width: 0.02, normal: Vec3::z() }
        .to_bytes()
}

/// Small deterministic hand shake so repeated syncs are not identical frames.
fn jitter(pose: &Pose, k: usize) -> Pose {
    let s = k as f64;
    pose.perturbed(&Vec3::new(0.002 * (1.7 * s).sin(), 0.002 * (1.1 * s).cos(), 0.0), &Vec3::new(0.003 * s.sin(), 0.0, 0.0))
}

fn registrant_pose(scenario: RangeScenario) -> Pose {
    match scenario {
        RangeScenario::Corridor => Pose::look_at(Vec3::new(0.0, EYE_HEIGHT, 5.0), WALL_TARGET, Vec3::y()),
        RangeScenario::HalfCircle => Trajectory::orbit_pose(Vec3::new(0.0, FLOOR_Y, 0.0), ARC_RADIUS, EYE_HEIGHT, 0.0),
    }
}

fn observer_pose(scenario: RangeScenario, station: f64) -> Pose {
    match scenario {
        RangeScenario::Corridor => {
            Pose::look_at(Vec3::new(0.0, EYE_HEIGHT, WALL_TARGET.z + station), WALL_TARGET, Vec3::y())
        }
        RangeScenario::HalfCircle => {
            Trajectory::orbit_pose(Vec3::new(0.0, FLOOR_Y, 0.0), ARC_RADIUS, EYE_HEIGHT, station.to_radians())
        }
    }
}

/// Maps the registrant's view and registers an object at the image center.
/// Returns the server and the object id, or `None` if the touch missed.
fn register(scenario: RangeScenario, mode: SyncMode, cfg: &RangeConfig, trial: u64) -> Option<(EdgeServer, Arc<Scene>, VoId)> {
    let scene = Arc::new(match scenario {
        RangeScenario::Corridor => Scene::corridor(cfg.seed + trial),
        RangeScenario::HalfCircle => Scene::half_circle_room(cfg.seed + trial),
    });
    let server_cfg = ServerConfig { mode, seed: cfg.seed + trial, ..cfg.server.clone() };
    let server = EdgeServer::new(server_cfg).expect("valid range config").with_oracle(scene.clone());
    let pose = registrant_pose(scenario);
    let mut a = Actor::new(&server, REGISTRANT, &pose, cfg.quality);
    for k in 0..3 {
        a.sync(&server, &scene, &jitter(&pose, k), cfg, trial);
    }
    let res = a.client.make_interaction((320.0, 240.0), None, Vec::new());
    let TouchResult::Interaction(msg) = res else {
        return None;
    };
    let msg = InteractionMessage { payload: line_payload(&protocol::vec3_f64(&msg.position)), ..msg };
    let outcome = server.handle_interaction(REGISTRANT, &msg).ok()?;
    Some((server, scene, outcome.vo_id))
}

/// Success rate per station for `mode`.
pub fn measure_vo_range(scenario: RangeScenario, mode: SyncMode, cfg: &RangeConfig) -> Vec<RangeRow> {
    let stations: Vec<f64> = match scenario {
        RangeScenario::Corridor => CORRIDOR_STATIONS_M.map(f64::from).collect(),
        RangeScenario::HalfCircle => ARC_STATIONS_DEG.to_vec(),
    };
    let per_trial: Vec<Vec<bool>> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|trial| {
            let Some((server, scene, vo)) = register(scenario, mode, cfg, trial) else {
                return vec![false; stations.len()];
            };
            stations
                .iter()
                .map(|&station| {
                    let fork = server.fork();
                    let pose = observer_pose(scenario, station);
                    let mut b = Actor::new(&fork, OBSERVER, &pose, cfg.quality);
                    (0..cfg.rounds).any(|k| {
                        b.sync(&fork, &scene, &jitter(&pose, k), cfg, trial);
                        b.sees(vo, 1)
                    })
                })
                .collect()
        })
        .collect();
    stations
        .iter()
        .enumerate()
        .map(|(i, &station)| RangeRow {
            station,
            trials: cfg.trials,
            successes: per_trial.iter().filter(|t| t[i]).count(),
        })
        .collect()
}

/// Result of the relocation script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelocationOutcome {
    pub vo_id: VoId,
    /// Observer sync round (1-based) after the move at which the object was
    /// first rendered on screen, if any.
    pub rendered_at_round: Option<usize>,
    pub rounds: usize,
}

/// Far end of the corridor floor, where the object is moved to.
pub const RELOCATION_TARGET: Vec3 = Vec3::new(0.0, FLOOR_Y, 29.5);

/// Device A stands mid-corridor facing the origin end, draws on the floor
/// and then drags the object to the far end. Device B stands near the far
/// end looking at that spot, so none of A's keyframes share its view.
pub fn relocation_trial(mode: SyncMode, seed: u64, rounds: usize) -> Option<RelocationOutcome> {
    let cfg = RangeConfig { seed, ..RangeConfig::for_scenario(RangeScenario::Corridor) };
    let cfg = RangeConfig { server: ServerConfig { mode, seed, ..cfg.server }, ..cfg };
    let scene = Arc::new(Scene::corridor(seed));
    let server = EdgeServer::new(cfg.server.clone()).ok()?.with_oracle(scene.clone());

    let pose_a = Pose::look_at(Vec3::new(0.0, EYE_HEIGHT, 15.0), Vec3::new(0.0, FLOOR_Y, 11.0), Vec3::y());
    let pose_b = Pose::look_at(Vec3::new(0.0, EYE_HEIGHT, 27.0), RELOCATION_TARGET, Vec3::y());
    let mut a = Actor::new(&server, REGISTRANT, &pose_a, cfg.quality);
    let mut b = Actor::new(&server, OBSERVER, &pose_b, cfg.quality);
    for k in 0..3 {
        a.sync(&server, &scene, &jitter(&pose_a, k), &cfg, 0);
        b.sync(&server, &scene, &jitter(&pose_b, k), &cfg, 0);
    }
    let TouchResult::Interaction(reg) = a.client.make_interaction((320.0, 240.0), None, Vec::new()) else {
        return None;
    };
    let at = protocol::vec3_f64(&reg.position);
    let reg = InteractionMessage { payload: line_payload(&at), ..reg };
    let created = server.handle_interaction(REGISTRANT, &reg).ok()?;
    a.sync(&server, &scene, &jitter(&pose_a, 3), &cfg, 0);
    let moved = InteractionMessage::manipulation(created.vo_id, &RELOCATION_TARGET, Vec::new());
    let moved = server.handle_interaction(REGISTRANT, &moved).ok()?;

    let mut rendered_at_round = None;
    for round in 1..=rounds {
        b.sync(&server, &scene, &jitter(&pose_b, 3 + round), &cfg, 0);
        let on_screen = b.sees(moved.vo_id, moved.version)
            && b.client.render_state(&pose_b).iter().any(|(id, px)| *id == moved.vo_id && px.is_some());
        if on_screen && rendered_at_round.is_none() {
            rendered_at_round = Some(round);
        }
    }
    Some(RelocationOutcome { vo_id: moved.vo_id, rendered_at_round, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observer_stations_look_at_the_object() {
        let k = crate::geometry::CameraIntrinsics::vga();
        for s in [1.0, 15.0, 30.0] {
            let px = crate::geometry::project(&k, &observer_pose(RangeScenario::Corridor, s), &WALL_TARGET).unwrap();
            assert!((px.x - 320.0).abs() < 1e-6 && (px.y - 240.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rate_of_empty_row_is_zero() {
        assert_eq!(RangeRow { station: 1.0, trials: 0, successes: 0 }.rate(), 0.0);
    }
}

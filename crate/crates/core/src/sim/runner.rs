//! Multi-device discrete-event runner.
//!
//! Devices produce frames at 30 fps and sync every fourth frame. Requests and
//! replies cross a shared [`PsLink`] per direction and an in-process
//! [`EdgeServer`] answers after a fixed processing delay. A device never has
//! more than one sync in flight; a sync frame that finds one outstanding is
//! tracked locally only.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{ClientConfig, DeviceClient, FrameRecord, TouchResult};
use crate::geometry::{cell_of, viewing_cells, Pose};
use crate::graph::{Plane, VirtualLine};
use crate::protocol::{self, InteractionOp, Message};
use crate::server::{ConfigError, EdgeServer, ServerConfig, ServerMetrics, SyncMode};
use crate::sim::channel::{ChannelModel, PsLink};
use crate::sim::metrics::{compute_ate, mean, percentile};
use crate::sim::scene::{Scene, FLOOR_Y};
use crate::sim::synth::{synthesize_frame, OctaveModel, SynthConfig};
use crate::sim::trajectory::{Trajectory, FPS};
use crate::sim::{frame_stream, stream_rng};
use crate::{DeviceId, Vec3, VoId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Corridor,
    HalfCircle,
    Static,
    /// Corridor walk where every device periodically draws and drags lines.
    Drawing,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Corridor, Scenario::HalfCircle, Scenario::Static, Scenario::Drawing];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Corridor => "corridor",
            Scenario::HalfCircle => "half_circle",
            Scenario::Static => "static",
            Scenario::Drawing => "drawing",
        }
    }

    pub fn scene(self, seed: u64) -> Scene {
        match self {
            Scenario::Corridor | Scenario::Drawing => Scene::corridor(seed),
            Scenario::HalfCircle => Scene::half_circle_room(seed),
            Scenario::Static => Scene::static_room(seed),
        }
    }

    /// Ground-truth path of device `index` out of `n`.
    pub fn trajectory(self, index: usize, n: usize, frames: usize) -> Trajectory {
        let spread = if n > 1 { index as f64 / (n - 1) as f64 - 0.5 } else { 0.0 };
        match self {
            Scenario::Corridor | Scenario::Drawing => Trajectory::corridor(frames, 1.6 * spread, 0.5, 28.0),
            Scenario::HalfCircle => {
                Trajectory::half_circle(frames, Vec3::new(0.0, FLOOR_Y, 0.0), 2.0 + 0.5 * spread, 1.5, 180.0)
            }
            Scenario::Static => {
                Trajectory::static_view(frames, Vec3::new(1.2 * spread, 1.4, -1.5), Vec3::new(0.0, 0.3, 1.0))
            }
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ConfigError::new("scenario", format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: SyncMode,
    pub devices: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub quality: u8,
    pub frames: usize,
    pub channel: ChannelModel,
    pub synth: SynthConfig,
    /// Mode and seed are taken from the fields above.
    pub server: ServerConfig,
    /// Quality is taken from the field above.
    pub client: ClientConfig,
}

impl RunConfig {
    pub fn new(mode: SyncMode, devices: usize, scenario: Scenario, seed: u64) -> Self {
        Self {
            mode,
            devices,
            scenario,
            seed,
            quality: 100,
            frames: 500,
            channel: ChannelModel::default(),
            synth: SynthConfig { octave: OctaveModel::DepthScaled { ref_depth: 8.0 }, ..Default::default() },
            server: ServerConfig::default(),
            client: ClientConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=64).contains(&self.devices) {
            return Err(ConfigError::new("devices", "must be in 1..=64"));
        }
        if !protocol::valid_quality(self.quality) {
            return Err(ConfigError::new("quality", "must be in 10..=100"));
        }
        if self.frames == 0 {
            return Err(ConfigError::new("frames", "must be positive"));
        }
        let ch = &self.channel;
        if !(ch.uplink_bps > 0.0 && ch.downlink_bps > 0.0) {
            return Err(ConfigError::new("channel", "capacities must be positive"));
        }
        if !(ch.base_rtt_us >= 0.0 && ch.server_processing_us >= 0.0) {
            return Err(ConfigError::new("channel", "delays must be non-negative"));
        }
        self.server_config().validate()?;
        self.client_config().validate()
    }

    fn server_config(&self) -> ServerConfig {
        ServerConfig { mode: self.mode, seed: self.seed, ..self.server.clone() }
    }

    fn client_config(&self) -> ClientConfig {
        ClientConfig { quality: self.quality, ..self.client.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub device_id: DeviceId,
    pub frames: usize,
    pub syncs: usize,
    pub lost_frames: usize,
    pub lost_syncs: usize,
    pub mean_latency_us: Option<f64>,
    pub p95_latency_us: Option<f64>,
    pub mean_bytes_up: Option<f64>,
    pub mean_bytes_down: Option<f64>,
    pub ate_device_gt: Option<f64>,
    pub ate_device_server: Option<f64>,
    pub ate_tracking_server: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: SyncMode,
    pub scenario: Scenario,
    pub devices: usize,
    pub seed: u64,
    pub quality: u8,
    pub frames: usize,
    /// Completed sync exchanges.
    pub syncs: usize,
    pub mean_latency_us: Option<f64>,
    pub p95_latency_us: Option<f64>,
    /// Per sync: FrameUpload bytes.
    pub mean_bytes_up: Option<f64>,
    /// Per sync: LocalGraphDown bytes.
    pub mean_bytes_down: Option<f64>,
    pub lost_frames: usize,
    pub lost_syncs: usize,
    /// Device-tracked positions against ground truth.
    pub ate_device_gt: Option<f64>,
    /// Keyframe positions the device reconstructs from received local graphs
    /// against the server's positions for the same frames.
    pub ate_device_server: Option<f64>,
    /// Device-tracked (before the reply) against server-aligned positions.
    pub ate_tracking_server: Option<f64>,
    pub ate_server_gt: Option<f64>,
    pub vo_checks: usize,
    /// Share of checks where an observer that had the object in view
    /// received its new version within two sync rounds. `None` without checks.
    pub vo_success_rate: Option<f64>,
    pub interactions: usize,
    pub channel_bytes_up: u64,
    pub channel_bytes_down: u64,
    pub per_device: Vec<DeviceReport>,
    pub server: ServerMetrics,
}

/// One line of `events.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_us: u64,
    pub device_id: DeviceId,
    pub kind: String,
    pub vo_id: VoId,
    pub version: u32,
}

impl EventRecord {
    pub const CSV_HEADER: &'static str = "t_us,device_id,kind,vo_id,version";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.t_us, self.device_id, self.kind, self.vo_id, self.version)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Sorted by device, then frame.
    pub frames: Vec<FrameRecord>,
    pub events: Vec<EventRecord>,
}

impl RunOutput {
    pub fn frames_csv(&self) -> String {
        csv(FrameRecord::CSV_HEADER, self.frames.iter().map(FrameRecord::to_csv))
    }

    pub fn events_csv(&self) -> String {
        csv(EventRecord::CSV_HEADER, self.events.iter().map(EventRecord::to_csv))
    }

    /// Writes `report.json`, `frames.csv` and `events.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)?)?;
        fs::write(dir.join("frames.csv"), self.frames_csv())?;
        fs::write(dir.join("events.csv"), self.events_csv())
    }
}

fn csv(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Event loop

#[derive(Debug, Clone, Copy)]
enum Event {
    Frame { device: usize, frame: usize },
    AtServer { xfer: u64 },
    ServerDone { xfer: u64 },
    AtDevice { xfer: u64 },
}

struct Scheduled {
    t: f64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: the heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

struct Transfer {
    device: usize,
    bytes: Vec<u8>,
    /// Upload frame index for syncs.
    frame: Option<usize>,
}

struct Outstanding {
    frame: usize,
    sent_us: f64,
}

/// Scripted brush strokes for the drawing scenario.
#[derive(Default)]
struct DrawState {
    vo: Option<VoId>,
    registered_at: Option<usize>,
    dragging: Option<(VoId, usize)>,
}

struct Device {
    id: DeviceId,
    client: DeviceClient,
    trajectory: Trajectory,
    phase_us: f64,
    current_frame: usize,
    outstanding: Option<Outstanding>,
    records: Vec<FrameRecord>,
    estimates: Vec<Option<Pose>>,
    /// (frame, server pose) for non-lost replies.
    server_poses: Vec<(usize, Pose)>,
    /// (device keyframe, server) positions for non-lost replies.
    keyframe_pairs: Vec<(Vec3, Vec3)>,
    lost_syncs: usize,
    draw: DrawState,
}

struct Check {
    observer: usize,
    vo: VoId,
    version: u32,
    remaining: u8,
}

const DRAW_PERIOD: usize = 60;
const DRAW_TOUCH: (f64, f64) = (320.0, 400.0);
const DRAG_FRAMES: usize = 5;

struct Sim<'a> {
    cfg: &'a RunConfig,
    scene: Arc<Scene>,
    gt_planes: Vec<Plane>,
    server: EdgeServer,
    devices: Vec<Device>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    uplink: PsLink,
    downlink: PsLink,
    transfers: BTreeMap<u64, Transfer>,
    next_xfer: u64,
    checks: Vec<Check>,
    checks_ok: usize,
    checks_failed: usize,
    interactions: usize,
    events: Vec<EventRecord>,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let scene = Arc::new(cfg.scenario.scene(cfg.seed));
        let server = EdgeServer::new(cfg.server_config())?.with_oracle(scene.clone());
        let mut phase_rng = stream_rng(cfg.seed, u64::MAX);
        // Devices are not synchronized: each starts at a random offset within
        // one sync period.
        let period_us = 1e6 / FPS * cfg.client.sync_every as f64;
        let devices = (0..cfg.devices)
            .map(|i| {
                let id = i as DeviceId + 1;
                let trajectory = cfg.scenario.trajectory(i, cfg.devices, cfg.frames);
                server.register_device(id, Some(trajectory.poses[0]));
                Ok(Device {
                    id,
                    client: DeviceClient::new(id, cfg.client_config())?,
                    trajectory,
                    phase_us: if i == 0 { 0.0 } else { phase_rng.gen_range(0.0..period_us) },
                    current_frame: 0,
                    outstanding: None,
                    records: Vec::with_capacity(cfg.frames),
                    estimates: Vec::with_capacity(cfg.frames),
                    server_poses: Vec::new(),
                    keyframe_pairs: Vec::new(),
                    lost_syncs: 0,
                    draw: DrawState::default(),
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let mut sim = Self {
            cfg,
            gt_planes: scene.ground_truth_planes(),
            scene,
            server,
            devices,
            heap: BinaryHeap::new(),
            seq: 0,
            uplink: PsLink::new(cfg.channel.uplink_bps),
            downlink: PsLink::new(cfg.channel.downlink_bps),
            transfers: BTreeMap::new(),
            next_xfer: 0,
            checks: Vec::new(),
            checks_ok: 0,
            checks_failed: 0,
            interactions: 0,
            events: Vec::new(),
        };
        for d in 0..sim.devices.len() {
            let t = sim.devices[d].phase_us;
            sim.schedule(t, Event::Frame { device: d, frame: 0 });
        }
        Ok(sim)
    }

    fn schedule(&mut self, t: f64, event: Event) {
        self.seq += 1;
        self.heap.push(Scheduled { t, seq: self.seq, event });
    }

    fn run(&mut self) {
        loop {
            let ev_t = self.heap.peek().map(|s| s.t);
            let up = self.uplink.next_completion();
            let down = self.downlink.next_completion();
            // Link completions win ties so a transfer finishing exactly at an
            // event time is not slowed by a transfer that starts then.
            let mut best: Option<(f64, u8)> = None;
            for (t, which) in [(up.map(|u| u.0), 0u8), (down.map(|d| d.0), 1u8), (ev_t, 2u8)]
                .into_iter()
                .filter_map(|(t, w)| t.map(|t| (t, w)))
            {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, which));
                }
            }
            let Some((t, which)) = best else { break };
            match which {
                0 => {
                    let (_, id) = up.expect("uplink completion");
                    self.uplink.finish(id, t);
                    self.schedule(t + self.cfg.channel.one_way_us(), Event::AtServer { xfer: id });
                }
                1 => {
                    let (_, id) = down.expect("downlink completion");
                    self.downlink.finish(id, t);
                    self.schedule(t + self.cfg.channel.one_way_us(), Event::AtDevice { xfer: id });
                }
                _ => {
                    let s = self.heap.pop().expect("event");
                    match s.event {
                        Event::Frame { device, frame } => self.on_frame(s.t, device, frame),
                        Event::AtServer { xfer } => self.on_server(s.t, xfer),
                        Event::ServerDone { xfer } => {
                            let bytes = self.transfers[&xfer].bytes.len();
                            self.downlink.start(xfer, bytes, s.t);
                        }
                        Event::AtDevice { xfer } => self.on_reply(s.t, xfer),
                    }
                }
            }
        }
    }

    fn send_up(&mut self, t: f64, device: usize, bytes: Vec<u8>, frame: Option<usize>) -> usize {
        self.next_xfer += 1;
        let id = self.next_xfer;
        let len = bytes.len();
        self.uplink.start(id, len, t);
        self.transfers.insert(id, Transfer { device, bytes, frame });
        len
    }

    fn on_frame(&mut self, t: f64, d: usize, frame: usize) {
        let gt = self.devices[d].trajectory.poses[frame];
        let mut rng = stream_rng(self.cfg.seed, frame_stream(self.devices[d].id, frame));
        let keypoints = synthesize_frame(&self.scene, &gt, &self.cfg.synth, self.cfg.quality, &mut rng);
        let dev = &mut self.devices[d];
        dev.current_frame = frame;
        let estimate = dev.client.track_frame(&keypoints);
        dev.estimates.push(estimate);
        dev.records.push(FrameRecord {
            frame_id: frame as u64,
            device_id: dev.id,
            t_us: t.round() as u64,
            bytes_up: 0,
            bytes_down: 0,
            latency_us: 0,
            pose_err: estimate.map(|p| (p.center() - gt.center()).norm()),
            lost: estimate.is_none(),
        });

        if dev.client.is_sync_frame(frame as u64) && dev.outstanding.is_none() {
            let env = dev.client.make_upload(frame as u64, t.round() as u64, &keypoints);
            let bytes = protocol::encode(&env).expect("device builds valid uploads");
            dev.outstanding = Some(Outstanding { frame, sent_us: t });
            let len = self.send_up(t, d, bytes, Some(frame));
            self.devices[d].records[frame].bytes_up = len as u64;
        }
        if self.cfg.scenario == Scenario::Drawing {
            self.draw(t, d, frame);
        }
        if frame + 1 < self.cfg.frames {
            let next = self.devices[d].phase_us + (frame + 1) as f64 * 1e6 / FPS;
            self.schedule(next, Event::Frame { device: d, frame: frame + 1 });
        }
    }

    /// Register a line every `DRAW_PERIOD` frames, grab it half a period
    /// later and drag it for a few frames.
    fn draw(&mut self, t: f64, d: usize, frame: usize) {
        let dev = &mut self.devices[d];
        let phase = (frame + 7 * d) % DRAW_PERIOD;
        let payload = |pose: &Pose| {
            let p = pose.center();
            let line = VirtualLine {
                start: p,
                end: p + Vec3::new(0.0, 0.0, 0.1),
                rgb: [220, 60, (40 * d) as u8],
                width: 0.02,
                normal: Vec3::y(),
            };
            line.to_bytes()
        };
        let Some(pose) = dev.client.pose() else { return };
        let msg = if phase == DRAW_PERIOD / 3 {
            dev.draw = DrawState { registered_at: Some(frame), ..Default::default() };
            match dev.client.make_interaction(DRAW_TOUCH, None, payload(&pose)) {
                TouchResult::Interaction(m) => Some(m),
                TouchResult::NoHit => None,
            }
        } else if let Some((vo, left)) = dev.draw.dragging {
            dev.draw.dragging = (left > 1).then_some((vo, left - 1));
            let uv = (DRAW_TOUCH.0, DRAW_TOUCH.1 - 10.0 * (DRAG_FRAMES - left) as f64);
            match dev.client.make_interaction(uv, Some(vo), Vec::new()) {
                TouchResult::Interaction(m) => Some(m),
                TouchResult::NoHit => None,
            }
        } else if dev.draw.registered_at.map_or(false, |f| frame == f + DRAW_PERIOD / 2) {
            let target = dev.draw.vo.and_then(|vo| {
                dev.client.render_state(&pose).into_iter().find(|(id, _)| *id == vo).and_then(|(_, px)| px)
            });
            match target.map(|px| dev.client.make_interaction((px.x, px.y), None, Vec::new())) {
                Some(TouchResult::Interaction(m)) => {
                    if m.op == InteractionOp::Manipulation {
                        dev.draw.dragging = Some((m.vo_id, DRAG_FRAMES));
                    }
                    Some(m)
                }
                _ => None,
            }
        } else {
            None
        };
        if let Some(m) = msg {
            let env = self.devices[d].client.envelope(m);
            let bytes = protocol::encode(&env).expect("device builds valid interactions");
            self.send_up(t, d, bytes, None);
        }
    }

    fn on_server(&mut self, t: f64, xfer: u64) {
        let (device, request) = {
            let tr = &self.transfers[&xfer];
            (tr.device, tr.bytes.clone())
        };
        let (reply, outcome) = match self.server.handle_request(&request) {
            Ok(r) => r,
            // Requests are produced by well-behaved clients; a rejection is a
            // bug, but it must not stall the simulation.
            Err(_) => {
                self.transfers.remove(&xfer);
                if let Some(o) = self.devices[device].outstanding.take() {
                    self.devices[device].records[o.frame].lost = true;
                }
                return;
            }
        };
        if let Some(out) = outcome {
            self.interactions += 1;
            let kind = if out.version == 1 { "registration" } else { "manipulation" };
            self.events.push(EventRecord {
                t_us: t.round() as u64,
                device_id: self.devices[device].id,
                kind: kind.into(),
                vo_id: out.vo_id,
                version: out.version,
            });
            if out.version == 1 {
                self.devices[device].draw.vo = Some(out.vo_id);
            }
            self.open_checks(device, out.vo_id, out.version);
        }
        self.transfers.get_mut(&xfer).expect("transfer").bytes = reply;
        self.schedule(t + self.cfg.channel.server_processing_us, Event::ServerDone { xfer });
    }

    /// Every other device whose true view covers the object's cell must see
    /// the new version within two sync rounds.
    fn open_checks(&mut self, sender: usize, vo: VoId, version: u32) {
        let Some(position) = self.server.with_graph(|g| g.virtual_objects().get(&vo).map(|v| v.position)) else {
            return;
        };
        let sc = self.server.config();
        let cell = cell_of(&position, sc.cellsize);
        for (i, dev) in self.devices.iter().enumerate() {
            if i == sender {
                continue;
            }
            let gt = dev.trajectory.poses[dev.current_frame];
            let cells = viewing_cells(&sc.intrinsics, &gt, &self.gt_planes, sc.sample_window, sc.th_dist, sc.cellsize);
            if cells.contains(&cell) {
                self.checks.push(Check { observer: i, vo, version, remaining: 2 });
            }
        }
    }

    fn on_reply(&mut self, t: f64, xfer: u64) {
        let tr = self.transfers.remove(&xfer).expect("transfer");
        let Some(frame) = tr.frame else { return };
        let d = tr.device;
        let env = protocol::decode(&tr.bytes).expect("server replies decode");
        let Message::LocalGraphDown(down) = env.message else { return };
        let dev = &mut self.devices[d];
        let sent = dev.outstanding.take().map_or(t, |o| o.sent_us);
        let rec = &mut dev.records[frame];
        rec.bytes_down = tr.bytes.len() as u64;
        rec.latency_us = (t - sent).round() as u64;
        if down.is_lost() {
            dev.lost_syncs += 1;
        } else {
            dev.server_poses.push((frame, down.pose.to_pose()));
        }
        dev.client.apply_local_graph(env.seq, &down).expect("reply matches an upload");
        if !down.is_lost() {
            let kf = dev.client.local_graph().keyframes().back().expect("reply queued a keyframe");
            dev.keyframe_pairs.push((kf.pose.center(), kf.server_pose.center()));
        }

        let visible = dev.client.local_graph().visible_vos();
        let mut i = 0;
        while i < self.checks.len() {
            let c = &mut self.checks[i];
            if c.observer != d {
                i += 1;
                continue;
            }
            let seen = visible.get(&c.vo).map_or(false, |v| v.version >= c.version);
            c.remaining -= 1;
            if seen || c.remaining == 0 {
                let kind = if seen { "vo_seen" } else { "vo_missed" };
                if seen {
                    self.checks_ok += 1;
                } else {
                    self.checks_failed += 1;
                }
                self.events.push(EventRecord {
                    t_us: t.round() as u64,
                    device_id: dev.id,
                    kind: kind.into(),
                    vo_id: c.vo,
                    version: c.version,
                });
                self.checks.swap_remove(i);
            } else {
                i += 1;
            }
        }
    }

    fn finish(self) -> RunOutput {
        let cfg = self.cfg;
        let mut per_device = Vec::new();
        let mut all_frames = Vec::new();
        let (mut dev_est, mut dev_gt) = (Vec::new(), Vec::new());
        let (mut ds_dev, mut ds_srv) = (Vec::new(), Vec::new());
        let (mut ts_dev, mut ts_srv) = (Vec::new(), Vec::new());
        let (mut srv_est, mut srv_gt) = (Vec::new(), Vec::new());
        let mut lost_syncs = 0;
        for dev in &self.devices {
            let (mut e, mut g) = (Vec::new(), Vec::new());
            for (f, est) in dev.estimates.iter().enumerate() {
                if let Some(p) = est {
                    e.push(p.center());
                    g.push(dev.trajectory.poses[f].center());
                }
            }
            let (mut a, mut b) = (Vec::new(), Vec::new());
            for (f, sp) in &dev.server_poses {
                srv_est.push(sp.center());
                srv_gt.push(dev.trajectory.poses[*f].center());
                if let Some(p) = dev.estimates[*f] {
                    a.push(p.center());
                    b.push(sp.center());
                }
            }
            let (kd, ks): (Vec<Vec3>, Vec<Vec3>) = dev.keyframe_pairs.iter().copied().unzip();
            let stats = SyncStats::of(&dev.records);
            per_device.push(DeviceReport {
                device_id: dev.id,
                frames: dev.records.len(),
                syncs: stats.syncs,
                lost_frames: dev.records.iter().filter(|r| r.lost).count(),
                lost_syncs: dev.lost_syncs,
                mean_latency_us: stats.mean_latency,
                p95_latency_us: stats.p95_latency,
                mean_bytes_up: stats.mean_up,
                mean_bytes_down: stats.mean_down,
                ate_device_gt: ate(&e, &g),
                ate_device_server: ate(&kd, &ks),
                ate_tracking_server: ate(&a, &b),
            });
            lost_syncs += dev.lost_syncs;
            dev_est.extend(e);
            dev_gt.extend(g);
            ds_dev.extend(kd);
            ds_srv.extend(ks);
            ts_dev.extend(a);
            ts_srv.extend(b);
            all_frames.extend(dev.records.iter().copied());
        }
        let stats = SyncStats::of(&all_frames);
        let checks = self.checks_ok + self.checks_failed;
        let report = RunReport {
            mode: cfg.mode,
            scenario: cfg.scenario,
            devices: cfg.devices,
            seed: cfg.seed,
            quality: cfg.quality,
            frames: cfg.frames,
            syncs: stats.syncs,
            mean_latency_us: stats.mean_latency,
            p95_latency_us: stats.p95_latency,
            mean_bytes_up: stats.mean_up,
            mean_bytes_down: stats.mean_down,
            lost_frames: all_frames.iter().filter(|r| r.lost).count(),
            lost_syncs,
            ate_device_gt: ate(&dev_est, &dev_gt),
            ate_device_server: ate(&ds_dev, &ds_srv),
            ate_tracking_server: ate(&ts_dev, &ts_srv),
            ate_server_gt: ate(&srv_est, &srv_gt),
            vo_checks: checks,
            vo_success_rate: (checks > 0).then(|| self.checks_ok as f64 / checks as f64),
            interactions: self.interactions,
            channel_bytes_up: self.uplink.bytes_total(),
            channel_bytes_down: self.downlink.bytes_total(),
            per_device,
            server: self.server.metrics(),
        };
        RunOutput { report, frames: all_frames, events: self.events }
    }
}

fn ate(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    (!a.is_empty()).then(|| compute_ate(a, b).expect("paired sequences"))
}

/// Aggregates over completed sync rows (rows with a reply).
struct SyncStats {
    syncs: usize,
    mean_latency: Option<f64>,
    p95_latency: Option<f64>,
    mean_up: Option<f64>,
    mean_down: Option<f64>,
}

impl SyncStats {
    fn of(rows: &[FrameRecord]) -> Self {
        let synced: Vec<&FrameRecord> = rows.iter().filter(|r| r.bytes_down > 0).collect();
        let lat: Vec<f64> = synced.iter().map(|r| r.latency_us as f64).collect();
        let up: Vec<f64> = synced.iter().map(|r| r.bytes_up as f64).collect();
        let down: Vec<f64> = synced.iter().map(|r| r.bytes_down as f64).collect();
        Self {
            syncs: synced.len(),
            mean_latency: mean(&lat),
            p95_latency: percentile(&lat, 95.0),
            mean_up: mean(&up),
            mean_down: mean(&down),
        }
    }
}

/// Runs one scenario to completion.
pub fn run_scenario(cfg: &RunConfig) -> Result<RunOutput, ConfigError> {
    let mut sim = Sim::new(cfg)?;
    sim.run();
    Ok(sim.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: SyncMode,
    pub devices: usize,
    pub mean_latency_us: Option<f64>,
    pub p95_latency_us: Option<f64>,
    pub mean_bytes_up: Option<f64>,
    pub mean_bytes_down: Option<f64>,
    pub lost_syncs: usize,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "mode,devices,mean_latency_us,p95_latency_us,mean_bytes_up,mean_bytes_down,lost_syncs";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|v| format!("{v:.1}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.mode,
            self.devices,
            f(self.mean_latency_us),
            f(self.p95_latency_us),
            f(self.mean_bytes_up),
            f(self.mean_bytes_down),
            self.lost_syncs
        )
    }
}

/// Runs `base` for every (mode, device count) pair in parallel. Rows come
/// back ordered by mode, then device count.
pub fn sweep(base: &RunConfig, modes: &[SyncMode], devices: &[usize]) -> Result<Vec<SweepRow>, ConfigError> {
    let jobs: Vec<RunConfig> = modes
        .iter()
        .flat_map(|&mode| devices.iter().map(move |&n| RunConfig { mode, devices: n, ..base.clone() }))
        .collect();
    for j in &jobs {
        j.validate()?;
    }
    jobs.par_iter()
        .map(|j| {
            let r = run_scenario(j)?.report;
            Ok(SweepRow {
                mode: r.mode,
                devices: r.devices,
                mean_latency_us: r.mean_latency_us,
                p95_latency_us: r.p95_latency_us,
                mean_bytes_up: r.mean_bytes_up,
                mean_bytes_down: r.mean_bytes_down,
                lost_syncs: r.lost_syncs,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    csv(SweepRow::CSV_HEADER, rows.iter().map(SweepRow::to_csv))
}

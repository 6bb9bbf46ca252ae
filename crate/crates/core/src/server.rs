//! The edge server.
//!
//! Each device has a session holding its last pose and a constant-velocity
//! motion model. An uploaded frame is aligned against the global map
//! (projection matching plus robust Gauss-Newton), may become a keyframe, and
//! is answered with a local graph whose contents depend on [`SyncMode`].
//!
//! Mapping is a stub: instead of triangulating, a [`LandmarkOracle`] names
//! the scene landmark behind each unmatched keypoint and the server inserts
//! it at its true position plus Gaussian noise.
//!
//! Locking: the graph sits behind a reader-writer lock. Alignment and
//! local-graph construction take the read side, so frames from different
//! devices align concurrently; keyframe creation and interactions take the
//! write side. Each session has its own mutex.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::Vector2;
use parking_lot::{Mutex, RwLock, RwLockWriteGuard};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{match_by_projection, Candidate, Keypoint, MatchParams};
use crate::geometry::{
    cell_of, fit_plane_ransac, project, sample_surfaces, solve_pose_gn, CameraIntrinsics, GnParams, Pose,
    RansacParams,
};
use crate::graph::{
    CellKey, GlobalGraph, GraphConfig, KeyFrame, MapPoint, Plane, PlaneLabel, VirtualLine, VirtualObject, VoPayload,
};
use crate::protocol::{
    self, vec3_f32, vec3_f64, CodecError, EncodeError, Envelope, FrameUpload, FullPointData, GraphPoint,
    InteractionMessage, InteractionOp, LocalGraphDown, Message, WirePlane, WirePose, WireVo,
};
use crate::{DeviceId, KeyFrameId, MapPointId, PlaneId, Vec3, VoId};

/// ORB pyramid scale factor and level count used for distance gating.
pub const SCALE_FACTOR: f64 = 1.2;
pub const SCALE_LEVELS: i32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SyncMode {
    /// Descriptor-free tracked points, objects chosen by viewing cells.
    #[serde(rename = "ecar")]
    Ecar,
    /// Every point of the local keyframes with descriptors, objects chosen by
    /// keyframe attachment.
    #[serde(rename = "fullmap", alias = "baseline_fullmap")]
    Fullmap,
    /// Descriptor-free tracked points, objects chosen by keyframe attachment.
    #[serde(rename = "kfvo", alias = "baseline_keyframe_vo")]
    KfVo,
}

impl SyncMode {
    pub const ALL: [SyncMode; 3] = [SyncMode::Ecar, SyncMode::Fullmap, SyncMode::KfVo];

    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::Ecar => "ecar",
            SyncMode::Fullmap => "fullmap",
            SyncMode::KfVo => "kfvo",
        }
    }
}

impl std::fmt::Display for SyncMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyncMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ecar" => Ok(SyncMode::Ecar),
            "fullmap" | "baseline_fullmap" => Ok(SyncMode::Fullmap),
            "kfvo" | "baseline_keyframe_vo" => Ok(SyncMode::KfVo),
            other => Err(ConfigError::new("mode", format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid configuration field `{field}`: {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { field: field.into(), reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub mode: SyncMode,
    pub intrinsics: CameraIntrinsics,
    pub cellsize: f64,
    /// Maximum ray length when sampling surfaces, scene units.
    pub th_dist: f64,
    /// Pixel spacing of the viewing-cell sampling lattice.
    pub sample_window: u32,
    pub keyframe_ratio: f64,
    /// Syncs after which a keyframe is forced.
    pub keyframe_max_gap: u32,
    pub covis_threshold: u32,
    /// Co-visible neighbors added per local keyframe.
    pub covis_neighbors: usize,
    pub local_keyframes_max: usize,
    pub huber_px: f64,
    pub gn_iters: usize,
    /// Alignment fails below this many inliers.
    pub min_inliers: usize,
    pub hamming_max: u32,
    pub match_ratio: f64,
    pub search_radius_px: f64,
    pub refine_radius_px: f64,
    /// Standard deviation of oracle map-point noise.
    pub map_noise: f64,
    /// Minimum cosine between a point's mean viewing direction and the
    /// current one for it to be a match candidate.
    pub view_cos_min: f64,
    pub ransac: RansacParams,
    pub plane_merge_deg: f64,
    pub plane_merge_offset: f64,
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            mode: SyncMode::Ecar,
            intrinsics: CameraIntrinsics::vga(),
            cellsize: 0.1,
            th_dist: 10.0,
            sample_window: 5,
            keyframe_ratio: 0.9,
            keyframe_max_gap: 4,
            covis_threshold: 15,
            covis_neighbors: 10,
            local_keyframes_max: 80,
            huber_px: 5.991f64.sqrt(),
            gn_iters: 10,
            min_inliers: 15,
            hamming_max: 50,
            match_ratio: 0.8,
            search_radius_px: 15.0,
            refine_radius_px: 4.0,
            map_noise: 0.01,
            view_cos_min: 0.5,
            ransac: RansacParams::default(),
            plane_merge_deg: 5.0,
            plane_merge_offset: 0.1,
            seed: 0,
        }
    }
}

impl ServerConfig {
    pub fn with_mode(mode: SyncMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::new(field, format!("must be positive, got {v}")))
            }
        };
        positive("cellsize", self.cellsize)?;
        positive("th_dist", self.th_dist)?;
        positive("huber_px", self.huber_px)?;
        positive("search_radius_px", self.search_radius_px)?;
        positive("refine_radius_px", self.refine_radius_px)?;
        if self.sample_window == 0 {
            return Err(ConfigError::new("sample_window", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.keyframe_ratio) {
            return Err(ConfigError::new("keyframe_ratio", "must lie in [0, 1]"));
        }
        if self.keyframe_max_gap == 0 {
            return Err(ConfigError::new("keyframe_max_gap", "must be at least 1"));
        }
        if self.min_inliers < 6 {
            return Err(ConfigError::new("min_inliers", "must be at least 6"));
        }
        if !(self.map_noise >= 0.0) {
            return Err(ConfigError::new("map_noise", "must be non-negative"));
        }
        CameraIntrinsics::new(
            self.intrinsics.fx,
            self.intrinsics.fy,
            self.intrinsics.cx,
            self.intrinsics.cy,
            self.intrinsics.width,
            self.intrinsics.height,
        )
        .map_err(|e| ConfigError::new("intrinsics", e.to_string()))?;
        Ok(())
    }

    /// Reads TOML, or JSON when the file name ends in `.json`.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("path", e.to_string()))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ConfigError::new("json", e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ConfigError::new("toml", e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `ECAR_MODE` if set.
    pub fn with_env_overrides(mut self) -> Result<Self, ConfigError> {
        if let Ok(mode) = std::env::var("ECAR_MODE") {
            self.mode = mode.parse()?;
        }
        Ok(self)
    }

    fn graph_config(&self) -> GraphConfig {
        GraphConfig { covis_threshold: self.covis_threshold, cellsize: self.cellsize }
    }

    fn gn_params(&self) -> GnParams {
        GnParams { iters: self.gn_iters, huber_px: self.huber_px }
    }

    fn match_params(&self, radius_px: f64) -> MatchParams {
        MatchParams { hamming_max: self.hamming_max, ratio: self.match_ratio, radius_px }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device {device}: sequence {seq} not after {last}")]
    StaleSequence { device: DeviceId, seq: u64, last: u64 },
    #[error("decode error: {0}")]
    Decode(#[from] CodecError),
    #[error("encode error: {0}")]
    Encode(#[from] EncodeError),
    #[error("unknown virtual object {0}")]
    UnknownVirtualObject(VoId),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("unexpected {0} message")]
    UnexpectedMessage(&'static str),
}

/// Ground-truth landmark behind a keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub position: Vec3,
    pub label: PlaneLabel,
}

/// Stand-in for triangulation: identifies the scene landmark behind each
/// selected keypoint of a frame seen from `pose`.
pub trait LandmarkOracle: Send + Sync {
    fn identify(
        &self,
        k: &CameraIntrinsics,
        pose: &Pose,
        keypoints: &[Keypoint],
        which: &[usize],
    ) -> Vec<Option<Landmark>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub frames: u64,
    pub aligned: u64,
    pub alignment_failures: u64,
    pub keyframes: u64,
    pub interactions: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

#[derive(Debug, Clone)]
pub struct DeviceSession {
    pub device_id: DeviceId,
    pub last_pose: Pose,
    pub last_seq: Option<u64>,
    /// Pose delta between the last two aligned frames.
    pub velocity: Pose,
    pub stats: SessionStats,
    bootstrap: Option<Pose>,
    ref_kf: Option<KeyFrameId>,
    syncs_since_kf: u32,
    has_pose: bool,
}

impl DeviceSession {
    fn new(device_id: DeviceId, bootstrap: Option<Pose>) -> Self {
        Self {
            device_id,
            last_pose: bootstrap.unwrap_or_default(),
            last_seq: None,
            velocity: Pose::identity(),
            stats: SessionStats::default(),
            bootstrap,
            ref_kf: None,
            syncs_since_kf: 0,
            has_pose: false,
        }
    }

    pub fn predicted_pose(&self) -> Pose {
        self.velocity.compose(&self.last_pose)
    }

    pub fn reference_keyframe(&self) -> Option<KeyFrameId> {
        self.ref_kf
    }

    fn accept_pose(&mut self, pose: Pose) {
        self.velocity = if self.has_pose { pose.compose(&self.last_pose.inverse()) } else { Pose::identity() };
        self.last_pose = pose;
        self.has_pose = true;
    }
}

/// Result of a Registration or Manipulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionOutcome {
    pub vo_id: VoId,
    pub version: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerMetrics {
    pub devices: usize,
    pub frames: u64,
    pub aligned: u64,
    pub alignment_failures: u64,
    pub interactions: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub keyframes: usize,
    pub map_points: usize,
    pub planes: usize,
    pub virtual_objects: usize,
}

struct Alignment {
    pose: Pose,
    matches: Vec<(MapPointId, usize)>,
}

#[derive(Default)]
struct Ids {
    map_point: AtomicU64,
    keyframe: AtomicU64,
    plane: AtomicU32,
    vo: AtomicU64,
}

impl Ids {
    fn copy(&self) -> Self {
        Self {
            map_point: AtomicU64::new(self.map_point.load(Ordering::SeqCst)),
            keyframe: AtomicU64::new(self.keyframe.load(Ordering::SeqCst)),
            plane: AtomicU32::new(self.plane.load(Ordering::SeqCst)),
            vo: AtomicU64::new(self.vo.load(Ordering::SeqCst)),
        }
    }
}

/// State guarded by the graph lock.
#[derive(Clone, Default)]
struct MapState {
    graph: GlobalGraph,
    labels: BTreeMap<MapPointId, PlaneLabel>,
}

pub struct EdgeServer {
    config: ServerConfig,
    map: RwLock<MapState>,
    sessions: RwLock<BTreeMap<DeviceId, Arc<Mutex<DeviceSession>>>>,
    oracle: Option<Arc<dyn LandmarkOracle>>,
    ids: Ids,
    interactions: AtomicU64,
}

impl EdgeServer {
    pub fn new(config: ServerConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            map: RwLock::new(MapState { graph: GlobalGraph::new(config.graph_config()), labels: BTreeMap::new() }),
            config,
            sessions: RwLock::new(BTreeMap::new()),
            oracle: None,
            ids: Ids::default(),
            interactions: AtomicU64::new(0),
        })
    }

    pub fn with_oracle(mut self, oracle: Arc<dyn LandmarkOracle>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn mode(&self) -> SyncMode {
        self.config.mode
    }

    /// Deep copy of the whole server, sessions included.
    pub fn fork(&self) -> Self {
        let sessions = self
            .sessions
            .read()
            .iter()
            .map(|(&id, s)| (id, Arc::new(Mutex::new(s.lock().clone()))))
            .collect();
        Self {
            config: self.config.clone(),
            map: RwLock::new(self.map.read().clone()),
            sessions: RwLock::new(sessions),
            oracle: self.oracle.clone(),
            ids: self.ids.copy(),
            interactions: AtomicU64::new(self.interactions.load(Ordering::SeqCst)),
        }
    }

    /// Opens (or resets) a session. A bootstrap pose seeds the first frame and
    /// is accepted as-is if that frame cannot be aligned.
    pub fn register_device(&self, device: DeviceId, bootstrap: Option<Pose>) {
        self.sessions.write().insert(device, Arc::new(Mutex::new(DeviceSession::new(device, bootstrap))));
    }

    /// Opens a session without bootstrap unless one exists.
    pub fn ensure_device(&self, device: DeviceId) {
        let mut sessions = self.sessions.write();
        sessions.entry(device).or_insert_with(|| Arc::new(Mutex::new(DeviceSession::new(device, None))));
    }

    pub fn session(&self, device: DeviceId) -> Option<DeviceSession> {
        self.sessions.read().get(&device).map(|s| s.lock().clone())
    }

    fn session_handle(&self, device: DeviceId) -> Result<Arc<Mutex<DeviceSession>>, ServerError> {
        self.sessions.read().get(&device).cloned().ok_or(ServerError::UnknownDevice(device))
    }

    /// Read access to the global graph.
    pub fn with_graph<R>(&self, f: impl FnOnce(&GlobalGraph) -> R) -> R {
        f(&self.map.read().graph)
    }

    /// Decodes one request, dispatches it and returns the encoded reply.
    /// Session byte counters include both directions.
    pub fn handle_message(&self, bytes: &[u8]) -> Result<Vec<u8>, ServerError> {
        self.handle_request(bytes).map(|(reply, _)| reply)
    }

    /// Like [`handle_message`](Self::handle_message), also reporting what an
    /// interaction did.
    pub fn handle_request(&self, bytes: &[u8]) -> Result<(Vec<u8>, Option<InteractionOutcome>), ServerError> {
        let env = protocol::decode(bytes)?;
        let device = env.device_id;
        let mut outcome = None;
        let reply = match &env.message {
            Message::FrameUpload(up) => Message::LocalGraphDown(self.handle_frame(device, env.seq, up)?),
            Message::Interaction(msg) => {
                outcome = Some(self.handle_interaction(device, msg)?);
                Message::Ack
            }
            Message::LocalGraphDown(_) => return Err(ServerError::UnexpectedMessage("LocalGraphDown")),
            Message::Ack => return Err(ServerError::UnexpectedMessage("Ack")),
        };
        let out = protocol::encode(&Envelope { device_id: device, seq: env.seq, message: reply })?;
        if let Ok(s) = self.session_handle(device) {
            let mut s = s.lock();
            s.stats.bytes_in += bytes.len() as u64;
            s.stats.bytes_out += out.len() as u64;
        }
        Ok((out, outcome))
    }

    /// Aligns one uploaded frame and returns the local graph for it.
    pub fn handle_frame(&self, device: DeviceId, seq: u64, upload: &FrameUpload) -> Result<LocalGraphDown, ServerError> {
        let handle = self.session_handle(device)?;
        let mut s = handle.lock();
        if let Some(last) = s.last_seq {
            if seq <= last {
                return Err(ServerError::StaleSequence { device, seq, last });
            }
        }
        s.last_seq = Some(seq);
        s.stats.frames += 1;
        let keypoints = upload.keypoints();
        if keypoints.is_empty() {
            s.stats.alignment_failures += 1;
            return Ok(lost_response(&s.last_pose));
        }

        let seed = s.bootstrap.unwrap_or_else(|| s.predicted_pose());
        let aligned = self.align(&self.map.read().graph, &keypoints, &seed);
        let Alignment { pose, matches } = match (aligned, s.bootstrap) {
            (Some(a), _) => a,
            (None, Some(boot)) => Alignment { pose: boot, matches: Vec::new() },
            (None, None) => {
                s.stats.alignment_failures += 1;
                return Ok(lost_response(&s.last_pose));
            }
        };
        s.bootstrap = None;
        s.accept_pose(pose);
        s.stats.aligned += 1;
        s.syncs_since_kf += 1;

        // Alignment ran under the read lock only; the write lock is taken just
        // for keyframe creation and downgraded for building the reply.
        let mut local = matches;
        let map = if self.needs_keyframe(&self.map.read().graph, &s, &local) {
            let mut map = self.map.write();
            let (kf, new_points) = self.create_keyframe(&mut map, device, &pose, &keypoints, &local);
            s.ref_kf = Some(kf);
            s.syncs_since_kf = 0;
            s.stats.keyframes += 1;
            local.extend(new_points);
            RwLockWriteGuard::downgrade(map)
        } else {
            self.map.read()
        };
        local.sort_unstable();
        Ok(self.build_local_graph(&map.graph, &pose, &keypoints, &local))
    }

    /// Map points that pass the scale and viewing-angle gates from `pose`.
    fn candidates<'g>(&self, graph: &'g GlobalGraph, pose: &Pose) -> Vec<Candidate<'g>> {
        let center = pose.center();
        graph
            .map_points()
            .values()
            .filter_map(|mp| {
                let desc = mp.descriptor.as_ref()?;
                if pose.transform(&mp.position).z <= 0.0 {
                    return None;
                }
                let offset = center - mp.position;
                let dist = offset.norm();
                if let (Some(lo), Some(hi)) = (mp.dist_min, mp.dist_max) {
                    if dist < 0.8 * lo || dist > 1.2 * hi {
                        return None;
                    }
                }
                if let Some(n) = mp.normal {
                    if dist > 0.0 && n.dot(&offset) / dist < self.config.view_cos_min {
                        return None;
                    }
                }
                Some(Candidate { id: mp.id, position: mp.position, descriptor: desc })
            })
            .collect()
    }

    fn correspondences(graph: &GlobalGraph, keypoints: &[Keypoint], matches: &[(MapPointId, usize)]) -> Vec<(Vec3, Vector2<f64>)> {
        matches
            .iter()
            .map(|&(mp, i)| (graph.map_points()[&mp].position, Vector2::new(keypoints[i].u, keypoints[i].v)))
            .collect()
    }

    /// Two-pass alignment: wide search at the seed, refine, narrow search at
    /// the refined pose, refine again.
    fn align(&self, graph: &GlobalGraph, keypoints: &[Keypoint], seed: &Pose) -> Option<Alignment> {
        let k = &self.config.intrinsics;
        let gn = self.config.gn_params();
        let mut pose = *seed;
        let mut matches = Vec::new();
        for radius in [self.config.search_radius_px, self.config.refine_radius_px] {
            let found = match_by_projection(k, &pose, self.candidates(graph, &pose), keypoints, &self.config.match_params(radius));
            matches = found.iter().map(|m| (m.id, m.keypoint)).collect();
            if matches.len() < self.config.min_inliers {
                return None;
            }
            let corr = Self::correspondences(graph, keypoints, &matches);
            let sol = solve_pose_gn(k, &corr, &pose, &gn).ok()?;
            if sol.inliers < self.config.min_inliers {
                return None;
            }
            pose = sol.pose;
        }
        let r = self.config.refine_radius_px;
        matches.retain(|&(mp, i)| {
            project(k, &pose, &graph.map_points()[&mp].position)
                .is_some_and(|px| (px - Vector2::new(keypoints[i].u, keypoints[i].v)).norm() <= r)
        });
        Some(Alignment { pose, matches })
    }

    fn needs_keyframe(&self, graph: &GlobalGraph, s: &DeviceSession, matches: &[(MapPointId, usize)]) -> bool {
        let Some(reference) = s.ref_kf.and_then(|id| graph.keyframe(id)) else { return true };
        if s.syncs_since_kf >= self.config.keyframe_max_gap {
            return true;
        }
        let total = reference.observations.len();
        if total == 0 {
            return true;
        }
        let tracked = matches.iter().filter(|(mp, _)| reference.observations.contains_key(mp)).count();
        (tracked as f64) / (total as f64) < self.config.keyframe_ratio
    }

    /// Inserts a keyframe with its observations, maps unseen landmarks, fits
    /// and links planes. Returns the keyframe id and the new points.
    fn create_keyframe(
        &self,
        map: &mut MapState,
        device: DeviceId,
        pose: &Pose,
        keypoints: &[Keypoint],
        matches: &[(MapPointId, usize)],
    ) -> (KeyFrameId, Vec<(MapPointId, usize)>) {
        let id = self.ids.keyframe.fetch_add(1, Ordering::SeqCst) + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let center = pose.center();
        let mut kf = KeyFrame::new(id, *pose, keypoints.to_vec());
        kf.device = Some(device);
        kf.observations = matches.iter().copied().collect();
        map.graph.insert_keyframe(kf).expect("fresh keyframe id with valid observations");
        for &(mp, _) in matches {
            refresh_normal(&mut map.graph, mp);
        }

        let mut new_points = Vec::new();
        if let Some(oracle) = &self.oracle {
            let used: BTreeSet<usize> = matches.iter().map(|&(_, i)| i).collect();
            let unmatched: Vec<usize> = (0..keypoints.len()).filter(|i| !used.contains(i)).collect();
            let found = oracle.identify(&self.config.intrinsics, pose, keypoints, &unmatched);
            let noise = Normal::new(0.0, self.config.map_noise.max(f64::MIN_POSITIVE)).expect("valid sigma");
            for (&idx, lm) in unmatched.iter().zip(found) {
                let Some(lm) = lm else { continue };
                let mut position = lm.position;
                if self.config.map_noise > 0.0 {
                    position += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
                }
                let mp_id = self.ids.map_point.fetch_add(1, Ordering::SeqCst) + 1;
                let kp = &keypoints[idx];
                let offset = center - position;
                let dist = offset.norm().max(1e-9);
                let dist_max = dist * SCALE_FACTOR.powi(kp.octave as i32);
                let mut mp = MapPoint::new(mp_id, position);
                mp.descriptor = Some(kp.descriptor);
                mp.normal = Some(offset / dist);
                mp.dist_max = Some(dist_max);
                mp.dist_min = Some(dist_max / SCALE_FACTOR.powi(SCALE_LEVELS - 1));
                map.graph.insert_map_point(mp).expect("fresh map point id");
                map.graph.add_observation(id, mp_id, idx).expect("unused keypoint");
                map.labels.insert(mp_id, lm.label);
                new_points.push((mp_id, idx));
            }
        }

        let planes = self.fit_keyframe_planes(map, id, &center, &mut rng);
        let global: Vec<Plane> = map.graph.planes().values().copied().collect();
        let hits = sample_surfaces(&self.config.intrinsics, pose, &global, self.config.sample_window, self.config.th_dist);
        let kf = map.graph.keyframe_mut(id).expect("just inserted");
        kf.plane_ids.extend(planes);
        for (x, plane) in hits {
            kf.plane_ids.insert(plane);
            kf.cell_keys.insert(cell_of(&x, self.config.cellsize));
        }
        (id, new_points)
    }

    /// Fits planes to the labeled points this keyframe observes. Walls are
    /// extracted one after another; each fit merges into a matching global
    /// plane when there is one.
    fn fit_keyframe_planes(&self, map: &mut MapState, kf: KeyFrameId, center: &Vec3, rng: &mut ChaCha8Rng) -> Vec<PlaneId> {
        let mut by_label: BTreeMap<PlaneLabel, Vec<Vec3>> = BTreeMap::new();
        for mp in map.graph.keyframe(kf).expect("keyframe exists").observations.keys() {
            if let (Some(label), Some(point)) = (map.labels.get(mp), map.graph.map_point(*mp)) {
                by_label.entry(*label).or_default().push(point.position);
            }
        }
        let mut linked = Vec::new();
        for (label, mut points) in by_label {
            let rounds = if label == PlaneLabel::Wall { 4 } else { 1 };
            for _ in 0..rounds {
                let Some((plane, inliers)) = fit_plane_ransac(&points, label, &self.config.ransac, Some(center), rng) else {
                    break;
                };
                if plane.is_well_formed() {
                    linked.push(self.merge_plane(&mut map.graph, plane));
                }
                let inl: BTreeSet<usize> = inliers.into_iter().collect();
                points = points.into_iter().enumerate().filter(|(i, _)| !inl.contains(i)).map(|(_, p)| p).collect();
            }
        }
        linked
    }

    fn merge_plane(&self, graph: &mut GlobalGraph, plane: Plane) -> PlaneId {
        let cos_max = self.config.plane_merge_deg.to_radians().cos();
        for existing in graph.planes().values() {
            if existing.label != plane.label {
                continue;
            }
            let (n, d) = if existing.normal.dot(&plane.normal) < 0.0 {
                (-existing.normal, -existing.offset)
            } else {
                (existing.normal, existing.offset)
            };
            if n.dot(&plane.normal) >= cos_max && (d - plane.offset).abs() < self.config.plane_merge_offset {
                return existing.id;
            }
        }
        let id = self.ids.plane.fetch_add(1, Ordering::SeqCst) + 1;
        graph.upsert_plane(Plane { id, ..plane });
        id
    }

    /// Local graph for an aligned frame. `local` holds the frame's matched
    /// and newly mapped points with the keypoint each was seen at.
    fn build_local_graph(
        &self,
        graph: &GlobalGraph,
        pose: &Pose,
        keypoints: &[Keypoint],
        local: &[(MapPointId, usize)],
    ) -> LocalGraphDown {
        let keyframes = self.local_keyframes(graph, local);
        let mut plane_ids: BTreeSet<PlaneId> = BTreeSet::new();
        for kf in &keyframes {
            plane_ids.extend(graph.keyframe(*kf).map(|k| k.plane_ids.iter().copied()).into_iter().flatten());
        }
        let planes: Vec<Plane> =
            plane_ids.iter().filter_map(|id| graph.planes().get(id).copied()).take(u8::MAX as usize).collect();

        let full = self.config.mode == SyncMode::Fullmap;
        let mut points: Vec<GraphPoint> = local
            .iter()
            .map(|&(mp, i)| {
                let kp = &keypoints[i];
                let point = &graph.map_points()[&mp];
                GraphPoint {
                    id: mp,
                    position: vec3_f32(&point.position),
                    obs_u: kp.u as f32,
                    obs_v: kp.v as f32,
                    angle: kp.angle as f32,
                    octave: kp.octave,
                    full: full.then(|| full_data(point)),
                }
            })
            .collect();
        if full {
            let sent: BTreeSet<MapPointId> = local.iter().map(|&(mp, _)| mp).collect();
            let mut extra: BTreeSet<MapPointId> = BTreeSet::new();
            for kf in &keyframes {
                if let Some(k) = graph.keyframe(*kf) {
                    extra.extend(k.observations.keys().filter(|mp| !sent.contains(mp)));
                }
            }
            for mp in extra {
                let point = &graph.map_points()[&mp];
                let px = project(&self.config.intrinsics, pose, &point.position);
                let (u, v) = px.map_or((-1.0, -1.0), |p| (p.x as f32, p.y as f32));
                points.push(GraphPoint {
                    id: mp,
                    position: vec3_f32(&point.position),
                    obs_u: u,
                    obs_v: v,
                    angle: 0.0,
                    octave: 0,
                    full: Some(full_data(point)),
                });
            }
            points.sort_by_key(|p| p.id);
        }
        points.truncate(u16::MAX as usize);

        let vos = match self.config.mode {
            SyncMode::Ecar => {
                let hits =
                    sample_surfaces(&self.config.intrinsics, pose, &planes, self.config.sample_window, self.config.th_dist);
                let cells: BTreeSet<CellKey> = hits.iter().map(|(x, _)| cell_of(x, self.config.cellsize)).collect();
                graph.vos_in_cells(&cells)
            }
            SyncMode::Fullmap | SyncMode::KfVo => graph.vos_of_keyframes(&keyframes),
        };
        LocalGraphDown {
            pose: WirePose::from(pose),
            points,
            planes: planes.iter().map(WirePlane::from).collect(),
            vos: vos.iter().take(u16::MAX as usize).map(wire_vo).collect(),
        }
    }

    /// Keyframes observing the local points, strongest first, plus their
    /// co-visible neighbors, capped at `local_keyframes_max`.
    fn local_keyframes(&self, graph: &GlobalGraph, local: &[(MapPointId, usize)]) -> BTreeSet<KeyFrameId> {
        let mut counts: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
        for &(mp, _) in local {
            for kf in graph.observers(mp) {
                *counts.entry(kf).or_default() += 1;
            }
        }
        let mut ranked: Vec<(KeyFrameId, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let cap = self.config.local_keyframes_max.max(1);
        let mut set: BTreeSet<KeyFrameId> = ranked.iter().take(cap).map(|&(k, _)| k).collect();
        for &(k, _) in &ranked {
            if set.len() >= cap {
                break;
            }
            for nb in graph.covisible_keyframes(k, self.config.covis_neighbors).unwrap_or_default() {
                if set.len() >= cap {
                    break;
                }
                set.insert(nb);
            }
        }
        set
    }

    /// Applies a Registration or Manipulation. Devices learn about the result
    /// only through later local graphs.
    pub fn handle_interaction(&self, device: DeviceId, msg: &InteractionMessage) -> Result<InteractionOutcome, ServerError> {
        let position = vec3_f64(&msg.position);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(ServerError::MalformedPayload("non-finite position".into()));
        }
        let payload = if msg.payload.len() == VirtualLine::ENCODED_LEN {
            VirtualLine::from_bytes(&msg.payload)
                .map(VoPayload::Line)
                .ok_or_else(|| ServerError::MalformedPayload("invalid virtual line".into()))?
        } else {
            VoPayload::Opaque(msg.payload.clone())
        };
        let session = self.sessions.read().get(&device).cloned();
        let ref_kf = session.as_ref().and_then(|s| s.lock().ref_kf);
        let mut map = self.map.write();
        let vo = match msg.op {
            InteractionOp::Registration => {
                let id = self.ids.vo.fetch_add(1, Ordering::SeqCst) + 1;
                VirtualObject { id, position, version: 1, owner_device: device, payload }
            }
            InteractionOp::Manipulation => {
                let old = map
                    .graph
                    .virtual_objects()
                    .get(&msg.vo_id)
                    .ok_or(ServerError::UnknownVirtualObject(msg.vo_id))?;
                let payload = if msg.payload.is_empty() { old.payload.clone() } else { payload };
                VirtualObject { position, version: old.version + 1, payload, ..old.clone() }
            }
        };
        let outcome = InteractionOutcome { vo_id: vo.id, version: vo.version };
        map.graph.attach_vo(vo);
        if let Some(kf) = ref_kf {
            map.graph.attach_vo_to_keyframe(outcome.vo_id, kf).ok();
        }
        drop(map);
        self.interactions.fetch_add(1, Ordering::SeqCst);
        if let Some(s) = session {
            s.lock().stats.interactions += 1;
        }
        Ok(outcome)
    }

    /// Read-consistent JSON view of planes, objects and device poses. With a
    /// region, only objects whose cell lies in the inclusive box are listed.
    pub fn spectate(&self, region: Option<(CellKey, CellKey)>) -> serde_json::Value {
        let (planes, vos) = {
            let map = self.map.read();
            let planes: Vec<Plane> = map.graph.planes().values().copied().collect();
            let vos: Vec<(VirtualObject, CellKey)> = map
                .graph
                .virtual_objects()
                .values()
                .filter_map(|vo| map.graph.vo_cell(vo.id).map(|c| (vo.clone(), c)))
                .filter(|(_, c)| region.map_or(true, |(lo, hi)| c.within(&lo, &hi)))
                .collect();
            (planes, vos)
        };
        let devices: Vec<serde_json::Value> = self
            .sessions
            .read()
            .values()
            .map(|s| {
                let s = s.lock();
                let c = s.last_pose.center();
                let forward = s.last_pose.rotation.row(2);
                serde_json::json!({
                    "device_id": s.device_id,
                    "position": [c.x, c.y, c.z],
                    "forward": [forward[0], forward[1], forward[2]],
                    "frames": s.stats.frames,
                    "lost": s.stats.alignment_failures,
                })
            })
            .collect();
        serde_json::json!({
            "cellsize": self.config.cellsize,
            "mode": self.config.mode,
            "planes": planes.iter().map(|p| serde_json::json!({
                "id": p.id,
                "label": p.label,
                "normal": [p.normal.x, p.normal.y, p.normal.z],
                "offset": p.offset,
            })).collect::<Vec<_>>(),
            "virtual_objects": vos.iter().map(|(vo, cell)| {
                let mut v = serde_json::json!({
                    "id": vo.id,
                    "position": [vo.position.x, vo.position.y, vo.position.z],
                    "version": vo.version,
                    "owner": vo.owner_device,
                    "cell": cell.0,
                });
                if let VoPayload::Line(line) = &vo.payload {
                    v["line"] = serde_json::to_value(line).expect("line serializes");
                }
                v
            }).collect::<Vec<_>>(),
            "devices": devices,
        })
    }

    pub fn metrics(&self) -> ServerMetrics {
        let mut m = ServerMetrics { interactions: self.interactions.load(Ordering::SeqCst), ..Default::default() };
        for s in self.sessions.read().values() {
            let s = s.lock();
            m.devices += 1;
            m.frames += s.stats.frames;
            m.aligned += s.stats.aligned;
            m.alignment_failures += s.stats.alignment_failures;
            m.bytes_in += s.stats.bytes_in;
            m.bytes_out += s.stats.bytes_out;
        }
        let map = self.map.read();
        m.keyframes = map.graph.keyframes().len();
        m.map_points = map.graph.map_points().len();
        m.planes = map.graph.planes().len();
        m.virtual_objects = map.graph.virtual_objects().len();
        m
    }
}

fn lost_response(pose: &Pose) -> LocalGraphDown {
    LocalGraphDown { pose: WirePose::from(pose), ..Default::default() }
}

fn full_data(mp: &MapPoint) -> FullPointData {
    FullPointData {
        descriptor: mp.descriptor.unwrap_or(crate::features::Descriptor([0; 32])),
        normal: vec3_f32(&mp.normal.unwrap_or_else(Vec3::zeros)),
        dist_min: mp.dist_min.unwrap_or(0.0) as f32,
        dist_max: mp.dist_max.unwrap_or(0.0) as f32,
    }
}

fn wire_vo(vo: &VirtualObject) -> WireVo {
    WireVo { id: vo.id, position: vec3_f32(&vo.position), version: vo.version, payload: vo.payload.to_bytes() }
}

/// Mean unit direction from the point toward its observing keyframes.
fn refresh_normal(graph: &mut GlobalGraph, mp: MapPointId) {
    let Some(point) = graph.map_point(mp) else { return };
    let p = point.position;
    let mut sum = Vec3::zeros();
    for kf in graph.observers(mp) {
        if let Some(k) = graph.keyframe(kf) {
            let d = k.pose.center() - p;
            if d.norm() > 0.0 {
                sum += d.normalize();
            }
        }
    }
    if sum.norm() > 0.0 {
        graph.map_point_mut(mp).expect("exists").normal = Some(sum.normalize());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Descriptor;

    fn upload(n: usize) -> FrameUpload {
        let kp = protocol::WireKeypoint { u: 1.0, v: 1.0, angle: 0.0, octave: 0, descriptor: Descriptor([0; 32]) };
        FrameUpload { frame_id: 1, timestamp_us: 0, quality: 100, keypoints: vec![kp; n] }
    }

    #[test]
    fn mode_names() {
        assert_eq!("baseline_fullmap".parse::<SyncMode>().unwrap(), SyncMode::Fullmap);
        assert_eq!("KFVO".parse::<SyncMode>().unwrap(), SyncMode::KfVo);
        assert!("nope".parse::<SyncMode>().is_err());
        let cfg: ServerConfig = toml::from_str("mode = \"baseline_keyframe_vo\"\ncellsize = 0.2").unwrap();
        assert_eq!(cfg.mode, SyncMode::KfVo);
        assert_eq!(cfg.cellsize, 0.2);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = ServerConfig { cellsize: 0.0, ..Default::default() };
        assert_eq!(cfg.validate().unwrap_err().field, "cellsize");
        assert!(EdgeServer::new(cfg).is_err());
    }

    #[test]
    fn unknown_device_and_empty_frame() {
        let server = EdgeServer::new(ServerConfig::default()).unwrap();
        assert_eq!(server.handle_frame(4, 1, &upload(0)).unwrap_err(), ServerError::UnknownDevice(4));
        let pose = Pose::look_at(Vec3::new(0.0, 1.5, 0.0), Vec3::new(0.0, 1.0, 4.0), Vec3::y());
        server.register_device(4, Some(pose));
        server.handle_frame(4, 1, &upload(0)).map(|down| assert!(down.is_lost())).unwrap();
        assert_eq!(server.session(4).unwrap().last_pose, pose);
        assert!(matches!(server.handle_frame(4, 1, &upload(0)), Err(ServerError::StaleSequence { .. })));
    }

    #[test]
    fn registration_and_manipulation_cells() {
        let server = EdgeServer::new(ServerConfig::default()).unwrap();
        let reg = InteractionMessage::registration(&Vec3::new(5.01, 0.01, 15.01), vec![]);
        let out = server.handle_interaction(1, &reg).unwrap();
        assert_eq!(out.version, 1);
        server.with_graph(|g| assert_eq!(g.vo_cell(out.vo_id), Some(CellKey::new(50, 0, 150))));
        let mv = InteractionMessage::manipulation(out.vo_id, &Vec3::new(5.01, 0.01, 29.01), vec![]);
        assert_eq!(server.handle_interaction(1, &mv).unwrap().version, 2);
        server.with_graph(|g| {
            assert_eq!(g.vo_cell(out.vo_id), Some(CellKey::new(50, 0, 290)));
            assert!(g.cells()[&CellKey::new(50, 0, 150)].vo_ids.is_empty());
            g.verify().unwrap();
        });
        let before = server.spectate(None);
        let bad = InteractionMessage::manipulation(99, &Vec3::zeros(), vec![]);
        assert_eq!(server.handle_interaction(1, &bad), Err(ServerError::UnknownVirtualObject(99)));
        assert_eq!(server.spectate(None), before);
    }

    #[test]
    fn malformed_line_rejected() {
        let server = EdgeServer::new(ServerConfig::default()).unwrap();
        let mut bytes = vec![0u8; VirtualLine::ENCODED_LEN];
        bytes[27..31].copy_from_slice(&(-1.0f32).to_le_bytes());
        let msg = InteractionMessage::registration(&Vec3::zeros(), bytes);
        assert!(matches!(server.handle_interaction(1, &msg), Err(ServerError::MalformedPayload(_))));
    }

    #[test]
    fn spectate_empty_and_after_registration() {
        let server = EdgeServer::new(ServerConfig::default()).unwrap();
        let s = server.spectate(None);
        assert_eq!(s["planes"].as_array().unwrap().len(), 0);
        assert_eq!(s["virtual_objects"].as_array().unwrap().len(), 0);
        server.handle_interaction(1, &InteractionMessage::registration(&Vec3::new(0.5, 0.0, 0.5), vec![])).unwrap();
        let s = server.spectate(None);
        assert_eq!(s["virtual_objects"][0]["version"], 1);
        let off = server.spectate(Some((CellKey::new(10, 10, 10), CellKey::new(20, 20, 20))));
        assert_eq!(off["virtual_objects"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn fork_is_independent() {
        let server = EdgeServer::new(ServerConfig::default()).unwrap();
        server.handle_interaction(1, &InteractionMessage::registration(&Vec3::zeros(), vec![])).unwrap();
        let fork = server.fork();
        fork.handle_interaction(1, &InteractionMessage::registration(&Vec3::zeros(), vec![])).unwrap();
        assert_eq!(server.metrics().virtual_objects, 1);
        assert_eq!(fork.metrics().virtual_objects, 2);
        // Ids continue from the parent.
        fork.with_graph(|g| assert!(g.virtual_objects().contains_key(&2)));
    }
}

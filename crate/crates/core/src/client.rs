//! The device side.
//!
//! A device tracks its pose every frame against a small local map, uploads
//! every `sync_every`-th frame and folds the server's reply into a bounded
//! queue of keyframes. Map points are reference counted across the queue:
//! evicting the oldest keyframe releases its points, and a point nobody
//! references any more is dropped.
//!
//! Local graphs arrive without descriptors. The device looks up its own
//! keypoint at the transmitted pixel position in the frame it uploaded and
//! adopts that keypoint's descriptor.

use std::collections::{BTreeMap, VecDeque};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{match_by_projection, Candidate, Descriptor, Keypoint, KeypointIndex, MatchParams};
use crate::geometry::{back_project_ray, project, reconstruct_point, solve_pose_gn, CameraIntrinsics, GnParams, Pose};
use crate::graph::{Plane, VirtualObject, VoPayload};
use crate::protocol::{
    self, vec3_f64, CodecError, EncodeError, Envelope, FrameUpload, InteractionMessage, LocalGraphDown,
    Message, WireKeypoint,
};
use crate::server::ConfigError;
use crate::{DeviceId, MapPointId, Vec3, VoId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("decode error: {0}")]
    Decode(#[from] CodecError),
    #[error("encode error: {0}")]
    Encode(#[from] EncodeError),
    #[error("no pending upload with sequence {0}")]
    UnknownSequence(u64),
    #[error("expected a local graph")]
    UnexpectedMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub intrinsics: CameraIntrinsics,
    /// Upload every n-th frame.
    pub sync_every: u32,
    /// Keyframe queue length.
    pub queue_len: usize,
    pub hamming_max: u32,
    pub match_ratio: f64,
    /// Compression-quality analog, 10..=100 in steps of 10.
    pub quality: u8,
    pub search_radius_px: f64,
    pub refine_radius_px: f64,
    /// Descriptor rebinding search radius.
    pub rebind_px: f64,
    pub min_inliers: usize,
    pub gn_iters: usize,
    pub huber_px: f64,
    pub th_dist: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::vga(),
            sync_every: 4,
            queue_len: 10,
            hamming_max: 50,
            match_ratio: 0.8,
            quality: 100,
            search_radius_px: 15.0,
            refine_radius_px: 4.0,
            rebind_px: 2.0,
            min_inliers: 15,
            gn_iters: 10,
            huber_px: 5.991f64.sqrt(),
            th_dist: 10.0,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sync_every == 0 {
            return Err(ConfigError::new("sync_every", "must be at least 1"));
        }
        if self.queue_len == 0 {
            return Err(ConfigError::new("queue_len", "must be at least 1"));
        }
        if !protocol::valid_quality(self.quality) {
            return Err(ConfigError::new("quality", format!("{} is not one of 10, 20, ..., 100", self.quality)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalPoint {
    pub id: MapPointId,
    pub position: Vec3,
    pub descriptor: Descriptor,
    /// Queued keyframes referencing the point.
    pub obs_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceKeyFrame {
    pub seq: u64,
    /// Pose the device reconstructs from its own keypoints and the received
    /// points.
    pub pose: Pose,
    /// Pose the server reported for the same frame.
    pub server_pose: Pose,
    pub points: Vec<MapPointId>,
}

/// Bounded keyframe queue with reference-counted map points, planes and the
/// latest known virtual objects.
#[derive(Debug, Clone)]
pub struct DeviceLocalGraph {
    capacity: usize,
    queue: VecDeque<DeviceKeyFrame>,
    map_points: BTreeMap<MapPointId, LocalPoint>,
    planes: Vec<Plane>,
    visible_vos: BTreeMap<VoId, VirtualObject>,
    /// Highest version ever seen per object.
    vo_versions: BTreeMap<VoId, u32>,
}

impl DeviceLocalGraph {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            queue: VecDeque::new(),
            map_points: BTreeMap::new(),
            planes: Vec::new(),
            visible_vos: BTreeMap::new(),
            vo_versions: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn keyframes(&self) -> &VecDeque<DeviceKeyFrame> {
        &self.queue
    }

    pub fn map_points(&self) -> &BTreeMap<MapPointId, LocalPoint> {
        &self.map_points
    }

    pub fn planes(&self) -> &[Plane] {
        &self.planes
    }

    pub fn visible_vos(&self) -> &BTreeMap<VoId, VirtualObject> {
        &self.visible_vos
    }

    /// Appends a keyframe observing `points` (position and rebound
    /// descriptor each). The newest observation refreshes a point's position
    /// and descriptor. Returns ids deleted by the eviction, if any.
    pub fn push_keyframe(
        &mut self,
        seq: u64,
        pose: Pose,
        server_pose: Pose,
        points: Vec<(MapPointId, Vec3, Descriptor)>,
    ) -> Vec<MapPointId> {
        let mut ids = Vec::with_capacity(points.len());
        for (id, position, descriptor) in points {
            if ids.contains(&id) {
                continue;
            }
            ids.push(id);
            let entry = self
                .map_points
                .entry(id)
                .or_insert(LocalPoint { id, position, descriptor, obs_count: 0 });
            entry.position = position;
            entry.descriptor = descriptor;
            entry.obs_count += 1;
        }
        self.queue.push_back(DeviceKeyFrame { seq, pose, server_pose, points: ids });
        let mut deleted = Vec::new();
        while self.queue.len() > self.capacity {
            let old = self.queue.pop_front().expect("queue over capacity is nonempty");
            for id in old.points {
                let point = self.map_points.get_mut(&id).expect("queued points are stored");
                point.obs_count -= 1;
                if point.obs_count == 0 {
                    self.map_points.remove(&id);
                    deleted.push(id);
                }
            }
        }
        deleted.sort_unstable();
        deleted
    }

    pub fn replace_planes(&mut self, planes: Vec<Plane>) {
        self.planes = planes;
    }

    /// Replaces the visible set with `vos`, except that an object never goes
    /// back to an older version than one already seen.
    pub fn update_vos(&mut self, vos: Vec<VirtualObject>) {
        let mut next = BTreeMap::new();
        for vo in vos {
            let best = self.vo_versions.entry(vo.id).or_insert(0);
            if vo.version >= *best {
                *best = vo.version;
                next.insert(vo.id, vo);
            } else if let Some(newer) = self.visible_vos.get(&vo.id) {
                next.insert(vo.id, newer.clone());
            }
        }
        self.visible_vos = next;
    }

    /// Recounts references from the queue.
    pub fn verify(&self) -> Result<(), String> {
        if self.queue.len() > self.capacity {
            return Err(format!("queue length {} exceeds {}", self.queue.len(), self.capacity));
        }
        let mut counts: BTreeMap<MapPointId, u32> = BTreeMap::new();
        for kf in &self.queue {
            for id in &kf.points {
                *counts.entry(*id).or_default() += 1;
            }
        }
        if counts.len() != self.map_points.len() {
            return Err(format!("{} referenced points but {} stored", counts.len(), self.map_points.len()));
        }
        for (id, c) in counts {
            match self.map_points.get(&id) {
                Some(p) if p.obs_count == c => {}
                Some(p) => return Err(format!("point {id} obs_count {} != {c}", p.obs_count)),
                None => return Err(format!("point {id} missing")),
            }
        }
        Ok(())
    }
}

/// Outcome of a touch.
#[derive(Debug, Clone, PartialEq)]
pub enum TouchResult {
    Interaction(InteractionMessage),
    NoHit,
}

/// Casts the touch ray. Objects are tested first as spheres of their pick
/// radius (nearest hit wins) and yield a Manipulation; otherwise the nearest
/// plane hit yields a Registration. While dragging, the dragged object is
/// moved to the plane hit instead.
pub fn touch(
    k: &CameraIntrinsics,
    pose: &Pose,
    planes: &[Plane],
    vos: &BTreeMap<VoId, VirtualObject>,
    (u, v): (f64, f64),
    drag: Option<VoId>,
    th_dist: f64,
    payload: Vec<u8>,
) -> TouchResult {
    let ray = back_project_ray(k, pose, u, v);
    let plane_hit = reconstruct_point(&ray, planes, th_dist).map(|(x, _)| x);
    if let Some(id) = drag {
        return match plane_hit {
            Some(x) => TouchResult::Interaction(InteractionMessage::manipulation(id, &x, payload)),
            None => TouchResult::NoHit,
        };
    }
    let mut best: Option<(f64, VoId, Vec3)> = None;
    for vo in vos.values() {
        let r = vo.payload.pick_radius();
        let oc = vo.position - ray.origin;
        let along = oc.dot(&ray.direction);
        let perp2 = oc.norm_squared() - along * along;
        if perp2 > r * r {
            continue;
        }
        let s = along - (r * r - perp2).sqrt();
        let s = if s > 0.0 { s } else { along };
        if s <= 0.0 {
            continue;
        }
        if best.map_or(true, |(bs, bid, _)| s < bs || (s == bs && vo.id < bid)) {
            best = Some((s, vo.id, vo.position));
        }
    }
    if let (Some((s, id, position)), plane) = (best, plane_hit) {
        let plane_dist = plane.map(|x| (x - ray.origin).norm());
        if plane_dist.map_or(true, |d| s <= d) {
            return TouchResult::Interaction(InteractionMessage::manipulation(id, &position, payload));
        }
    }
    match plane_hit {
        Some(x) => TouchResult::Interaction(InteractionMessage::registration(&x, payload)),
        None => TouchResult::NoHit,
    }
}

/// Screen position of an object, or `None` when it is behind the camera or
/// outside the image.
pub type ScreenPos = Option<Vector2<f64>>;

/// One CSV row per device frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub device_id: DeviceId,
    pub t_us: u64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub latency_us: u64,
    /// Position error against ground truth; `None` while lost.
    pub pose_err: Option<f64>,
    pub lost: bool,
}

impl FrameRecord {
    pub const CSV_HEADER: &'static str = "frame_id,device_id,t_us,bytes_up,bytes_down,latency_us,pose_err,lost";

    pub fn to_csv(&self) -> String {
        let err = self.pose_err.map(|e| format!("{e:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.frame_id, self.device_id, self.t_us, self.bytes_up, self.bytes_down, self.latency_us, err, self.lost as u8
        )
    }
}

/// Device-side state machine.
#[derive(Debug, Clone)]
pub struct DeviceClient {
    device_id: DeviceId,
    config: ClientConfig,
    graph: DeviceLocalGraph,
    /// Last tracked (or dead-reckoned) pose.
    pose: Option<Pose>,
    velocity: Pose,
    lost: bool,
    next_seq: u64,
    /// Uploaded frames awaiting their local graph, by sequence number.
    pending: BTreeMap<u64, Vec<Keypoint>>,
    last_server_pose: Option<Pose>,
    messages_sent: u64,
}

impl DeviceClient {
    pub fn new(device_id: DeviceId, config: ClientConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Self {
            device_id,
            graph: DeviceLocalGraph::new(config.queue_len),
            config,
            pose: None,
            velocity: Pose::identity(),
            lost: true,
            next_seq: 1,
            pending: BTreeMap::new(),
            last_server_pose: None,
            messages_sent: 0,
        })
    }

    pub fn device_id(&self) -> DeviceId {
        self.device_id
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn local_graph(&self) -> &DeviceLocalGraph {
        &self.graph
    }

    /// Current pose estimate unless tracking is lost.
    pub fn pose(&self) -> Option<Pose> {
        (!self.lost).then_some(self.pose).flatten()
    }

    pub fn last_server_pose(&self) -> Option<Pose> {
        self.last_server_pose
    }

    pub fn messages_sent(&self) -> u64 {
        self.messages_sent
    }

    pub fn is_sync_frame(&self, frame_index: u64) -> bool {
        frame_index % self.config.sync_every as u64 == 0
    }

    /// Tracks one frame against the local map. Never talks to the network.
    pub fn track_frame(&mut self, keypoints: &[Keypoint]) -> Option<Pose> {
        let Some(last) = self.pose else { return None };
        let predicted = self.velocity.compose(&last);
        match self.localize(keypoints, &predicted) {
            Some(pose) => {
                if !self.lost {
                    self.velocity = pose.compose(&last.inverse());
                }
                self.pose = Some(pose);
                self.lost = false;
                Some(pose)
            }
            None => {
                // Dead-reckon so the next frame has a sensible seed.
                self.pose = Some(predicted);
                self.lost = true;
                None
            }
        }
    }

    fn localize(&self, keypoints: &[Keypoint], seed: &Pose) -> Option<Pose> {
        let points = self.graph.map_points();
        if points.len() < self.config.min_inliers || keypoints.is_empty() {
            return None;
        }
        let k = &self.config.intrinsics;
        let gn = GnParams { iters: self.config.gn_iters, huber_px: self.config.huber_px };
        let mut pose = *seed;
        for radius in [self.config.search_radius_px, self.config.refine_radius_px] {
            let params = MatchParams { hamming_max: self.config.hamming_max, ratio: self.config.match_ratio, radius_px: radius };
            let cands = points.values().map(|p| Candidate { id: p.id, position: p.position, descriptor: &p.descriptor });
            let matches = match_by_projection(k, &pose, cands, keypoints, &params);
            if matches.len() < self.config.min_inliers {
                return None;
            }
            let corr: Vec<(Vec3, Vector2<f64>)> = matches
                .iter()
                .map(|m| (points[&m.id].position, Vector2::new(keypoints[m.keypoint].u, keypoints[m.keypoint].v)))
                .collect();
            let sol = solve_pose_gn(k, &corr, &pose, &gn).ok()?;
            if sol.inliers < self.config.min_inliers {
                return None;
            }
            pose = sol.pose;
        }
        Some(pose)
    }

    /// Builds the upload for this frame and remembers its keypoints until the
    /// reply arrives.
    pub fn make_upload(&mut self, frame_id: u64, timestamp_us: u64, keypoints: &[Keypoint]) -> Envelope {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq, keypoints.to_vec());
        self.messages_sent += 1;
        Envelope {
            device_id: self.device_id,
            seq,
            message: Message::FrameUpload(FrameUpload {
                frame_id,
                timestamp_us,
                quality: self.config.quality,
                keypoints: keypoints.iter().map(WireKeypoint::from).collect(),
            }),
        }
    }

    /// Decodes a reply and applies it.
    pub fn apply_message(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        let env = protocol::decode(bytes)?;
        match env.message {
            Message::LocalGraphDown(down) => self.apply_local_graph(env.seq, &down),
            _ => Err(ClientError::UnexpectedMessage),
        }
    }

    /// Folds the reply for upload `seq` into the local graph: one new
    /// keyframe, rebound descriptors, planes and objects. A lost reply still
    /// occupies a (pointless) queue slot but leaves planes and objects alone.
    pub fn apply_local_graph(&mut self, seq: u64, down: &LocalGraphDown) -> Result<(), ClientError> {
        let frame = self.pending.remove(&seq).ok_or(ClientError::UnknownSequence(seq))?;
        // Replies arrive in order; anything older is dropped.
        self.pending.retain(|&s, _| s > seq);
        let pose = down.pose.to_pose();
        let index = KeypointIndex::new(&frame, 8.0);
        let mut bound = Vec::with_capacity(down.points.len());
        let mut corr = Vec::with_capacity(down.points.len());
        for p in &down.points {
            let near = index.nearest(p.obs_u as f64, p.obs_v as f64, self.config.rebind_px);
            let descriptor = match (&p.full, near) {
                (Some(full), _) => full.descriptor,
                (None, Some(i)) => frame[i].descriptor,
                (None, None) => continue,
            };
            let position = vec3_f64(&p.position);
            if let Some(i) = near {
                corr.push((position, Vector2::new(frame[i].u, frame[i].v)));
            }
            bound.push((p.id, position, descriptor));
        }
        let gn = GnParams { iters: self.config.gn_iters, huber_px: self.config.huber_px };
        let reconstructed = match solve_pose_gn(&self.config.intrinsics, &corr, &pose, &gn) {
            Ok(sol) if sol.inliers >= self.config.min_inliers => sol.pose,
            _ => pose,
        };
        self.graph.push_keyframe(seq, reconstructed, pose, bound);
        if down.is_lost() {
            return Ok(());
        }
        self.last_server_pose = Some(pose);
        self.graph.replace_planes(down.planes.iter().map(|p| p.to_plane()).collect());
        self.graph.update_vos(
            down.vos
                .iter()
                .map(|v| VirtualObject {
                    id: v.id,
                    position: vec3_f64(&v.position),
                    version: v.version,
                    owner_device: 0,
                    payload: VoPayload::from_bytes(&v.payload),
                })
                .collect(),
        );
        if self.lost || self.pose.is_none() {
            // Re-seed tracking from the server's estimate.
            self.pose = Some(pose);
            self.velocity = Pose::identity();
        }
        Ok(())
    }

    /// Interaction for a touch at pixel `(u, v)` using the current pose.
    pub fn make_interaction(&mut self, uv: (f64, f64), drag: Option<VoId>, payload: Vec<u8>) -> TouchResult {
        let Some(pose) = self.pose() else { return TouchResult::NoHit };
        let res = touch(
            &self.config.intrinsics,
            &pose,
            self.graph.planes(),
            self.graph.visible_vos(),
            uv,
            drag,
            self.config.th_dist,
            payload,
        );
        if matches!(res, TouchResult::Interaction(_)) {
            self.messages_sent += 1;
        }
        res
    }

    /// Wraps an interaction in an envelope with the next sequence number.
    pub fn envelope(&mut self, msg: InteractionMessage) -> Envelope {
        let seq = self.next_seq;
        self.next_seq += 1;
        Envelope { device_id: self.device_id, seq, message: Message::Interaction(msg) }
    }

    /// Every visible object projected through `pose`, ordered by id.
    pub fn render_state(&self, pose: &Pose) -> Vec<(VoId, ScreenPos)> {
        let k = &self.config.intrinsics;
        self.graph
            .visible_vos()
            .values()
            .map(|vo| {
                let px = project(k, pose, &vo.position).filter(|p| k.contains(p.x, p.y));
                (vo.id, px)
            })
            .collect()
    }
}

//! The graph-grid data structure.
//!
//! Keyframes observe map points; co-visibility edges link keyframes that
//! share at least `covis_threshold` observations; planes hang off keyframes;
//! virtual objects live in exactly one grid cell (and, for the keyframe
//! baseline, are also attached to one keyframe).
//!
//! All stores are ordered maps so that iteration, and therefore everything
//! built on top of it, is deterministic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{Descriptor, Keypoint};
use crate::geometry::{cell_of, Pose};
use crate::{DeviceId, KeyFrameId, MapPointId, PlaneId, Vec3, VoId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown keyframe {0}")]
    UnknownKeyFrame(KeyFrameId),
    #[error("unknown map point {0}")]
    UnknownMapPoint(MapPointId),
    #[error("unknown virtual object {0}")]
    UnknownVirtualObject(VoId),
    #[error("keyframe {kf} already observes map point {mp}")]
    DuplicateObservation { kf: KeyFrameId, mp: MapPointId },
    #[error("keypoint {index} of keyframe {kf} is out of range or already bound")]
    InvalidKeypoint { kf: KeyFrameId, index: usize },
    #[error("id {0} already in use")]
    DuplicateId(u64),
    #[error("graph inconsistent: {0}")]
    Inconsistent(String),
}

/// Integer grid coordinates `(i, j, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey(pub [i64; 3]);

impl CellKey {
    pub const fn new(i: i64, j: i64, k: i64) -> Self {
        Self([i, j, k])
    }

    pub fn center(&self, cellsize: f64) -> Vec3 {
        Vec3::new(
            (self.0[0] as f64 + 0.5) * cellsize,
            (self.0[1] as f64 + 0.5) * cellsize,
            (self.0[2] as f64 + 0.5) * cellsize,
        )
    }

    /// Inclusive box containment.
    pub fn within(&self, lo: &CellKey, hi: &CellKey) -> bool {
        (0..3).all(|a| self.0[a] >= lo.0[a] && self.0[a] <= hi.0[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vec3,
    pub descriptor: Option<Descriptor>,
    /// Mean viewing direction (point toward cameras), unit length.
    pub normal: Option<Vec3>,
    pub dist_min: Option<f64>,
    pub dist_max: Option<f64>,
    /// Number of keyframes observing the point. Maintained by the graph.
    pub obs_count: u32,
}

impl MapPoint {
    pub fn new(id: MapPointId, position: Vec3) -> Self {
        Self { id, position, descriptor: None, normal: None, dist_min: None, dist_max: None, obs_count: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    pub pose: Pose,
    /// map point id -> keypoint index
    pub observations: BTreeMap<MapPointId, usize>,
    pub keypoints: Vec<Keypoint>,
    pub plane_ids: BTreeSet<PlaneId>,
    pub cell_keys: BTreeSet<CellKey>,
    /// Device whose frame produced the keyframe, if any.
    pub device: Option<DeviceId>,
}

impl KeyFrame {
    pub fn new(id: KeyFrameId, pose: Pose, keypoints: Vec<Keypoint>) -> Self {
        Self {
            id,
            pose,
            observations: BTreeMap::new(),
            keypoints,
            plane_ids: BTreeSet::new(),
            cell_keys: BTreeSet::new(),
            device: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneLabel {
    Floor,
    Wall,
    Ceiling,
}

impl PlaneLabel {
    pub fn to_u8(self) -> u8 {
        match self {
            PlaneLabel::Floor => 0,
            PlaneLabel::Wall => 1,
            PlaneLabel::Ceiling => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(PlaneLabel::Floor),
            1 => Some(PlaneLabel::Wall),
            2 => Some(PlaneLabel::Ceiling),
            _ => None,
        }
    }
}

/// `normal . X + offset = 0`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub id: PlaneId,
    pub label: PlaneLabel,
    pub normal: Vec3,
    pub offset: f64,
}

impl Plane {
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        self.normal.dot(x) + self.offset
    }

    /// Unit normal and a label-consistent orientation (floor up, wall level).
    pub fn is_well_formed(&self) -> bool {
        let unit = (self.normal.norm() - 1.0).abs() <= 1e-6;
        let up = self.normal.dot(&Vec3::y()).abs();
        unit && match self.label {
            PlaneLabel::Floor | PlaneLabel::Ceiling => up > 0.9,
            PlaneLabel::Wall => up < 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub key: CellKey,
    pub vo_ids: BTreeSet<VoId>,
}

impl Default for CellKey {
    fn default() -> Self {
        CellKey::new(0, 0, 0)
    }
}

/// Line segment drawn by the collaborative brush.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualLine {
    pub start: Vec3,
    pub end: Vec3,
    pub rgb: [u8; 3],
    /// Meters, > 0.
    pub width: f64,
    pub normal: Vec3,
}

impl VirtualLine {
    pub const ENCODED_LEN: usize = 43;

    pub fn is_valid(&self) -> bool {
        self.width > 0.0 && (self.normal.norm() - 1.0).abs() <= 1e-3
    }

    /// start 3xf32, end 3xf32, rgb 3xu8, width f32, normal 3xf32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::ENCODED_LEN);
        let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        self.start.iter().for_each(|&v| put(v));
        self.end.iter().for_each(|&v| put(v));
        out.extend_from_slice(&self.rgb);
        out.extend_from_slice(&(self.width as f32).to_le_bytes());
        self.normal.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes()));
        out
    }

    /// Parses a 43-byte payload; `None` for other lengths or invalid lines.
    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != Self::ENCODED_LEN {
            return None;
        }
        let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64;
        let line = Self {
            start: Vec3::new(f(0), f(4), f(8)),
            end: Vec3::new(f(12), f(16), f(20)),
            rgb: [bytes[24], bytes[25], bytes[26]],
            width: f(27),
            normal: Vec3::new(f(31), f(35), f(39)),
        };
        line.is_valid().then_some(line)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoPayload {
    Line(VirtualLine),
    Opaque(Vec<u8>),
}

impl VoPayload {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            VoPayload::Line(l) => l.to_bytes(),
            VoPayload::Opaque(b) => b.clone(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        match VirtualLine::from_bytes(bytes) {
            Some(line) => VoPayload::Line(line),
            None => VoPayload::Opaque(bytes.to_vec()),
        }
    }

    /// Hit radius used by touch selection.
    pub fn pick_radius(&self) -> f64 {
        match self {
            VoPayload::Line(l) => l.width.max(0.05),
            VoPayload::Opaque(_) => 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualObject {
    pub id: VoId,
    pub position: Vec3,
    pub version: u32,
    pub owner_device: DeviceId,
    pub payload: VoPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub covis_threshold: u32,
    pub cellsize: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { covis_threshold: 15, cellsize: 0.1 }
    }
}

/// Server-side global graph (also reused by devices for their local graph).
#[derive(Debug, Clone)]
pub struct GlobalGraph {
    config: GraphConfig,
    map_points: BTreeMap<MapPointId, MapPoint>,
    keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    planes: BTreeMap<PlaneId, Plane>,
    virtual_objects: BTreeMap<VoId, VirtualObject>,
    cells: BTreeMap<CellKey, GridCell>,
    vo_cell: BTreeMap<VoId, CellKey>,
    /// Keyframe baseline: VO -> keyframe it is attached to.
    vo_keyframe: BTreeMap<VoId, KeyFrameId>,
    /// map point -> observing keyframes
    observers: BTreeMap<MapPointId, BTreeSet<KeyFrameId>>,
    /// Shared-observation counts for every keyframe pair sharing at least one
    /// point, stored symmetrically. Edges are the entries >= threshold.
    shared: BTreeMap<KeyFrameId, BTreeMap<KeyFrameId, u32>>,
}

impl Default for GlobalGraph {
    fn default() -> Self {
        Self::new(GraphConfig::default())
    }
}

impl GlobalGraph {
    pub fn new(config: GraphConfig) -> Self {
        Self {
            config,
            map_points: BTreeMap::new(),
            keyframes: BTreeMap::new(),
            planes: BTreeMap::new(),
            virtual_objects: BTreeMap::new(),
            cells: BTreeMap::new(),
            vo_cell: BTreeMap::new(),
            vo_keyframe: BTreeMap::new(),
            observers: BTreeMap::new(),
            shared: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn map_points(&self) -> &BTreeMap<MapPointId, MapPoint> {
        &self.map_points
    }

    pub fn keyframes(&self) -> &BTreeMap<KeyFrameId, KeyFrame> {
        &self.keyframes
    }

    pub fn planes(&self) -> &BTreeMap<PlaneId, Plane> {
        &self.planes
    }

    pub fn virtual_objects(&self) -> &BTreeMap<VoId, VirtualObject> {
        &self.virtual_objects
    }

    pub fn cells(&self) -> &BTreeMap<CellKey, GridCell> {
        &self.cells
    }

    pub fn map_point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.map_points.get(&id)
    }

    pub fn map_point_mut(&mut self, id: MapPointId) -> Option<&mut MapPoint> {
        self.map_points.get_mut(&id)
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Option<&KeyFrame> {
        self.keyframes.get(&id)
    }

    pub fn keyframe_mut(&mut self, id: KeyFrameId) -> Option<&mut KeyFrame> {
        self.keyframes.get_mut(&id)
    }

    pub fn observers(&self, mp: MapPointId) -> impl Iterator<Item = KeyFrameId> + '_ {
        self.observers.get(&mp).into_iter().flatten().copied()
    }

    pub fn insert_map_point(&mut self, mut mp: MapPoint) -> Result<(), GraphError> {
        if self.map_points.contains_key(&mp.id) {
            return Err(GraphError::DuplicateId(mp.id));
        }
        mp.obs_count = 0;
        self.map_points.insert(mp.id, mp);
        Ok(())
    }

    /// Inserts a keyframe; any observations it carries are registered.
    pub fn insert_keyframe(&mut self, mut kf: KeyFrame) -> Result<(), GraphError> {
        if self.keyframes.contains_key(&kf.id) {
            return Err(GraphError::DuplicateId(kf.id));
        }
        let observations = std::mem::take(&mut kf.observations);
        let id = kf.id;
        self.keyframes.insert(id, kf);
        for (mp, idx) in observations {
            if let Err(e) = self.add_observation(id, mp, idx) {
                self.remove_keyframe(id).ok();
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn upsert_plane(&mut self, plane: Plane) {
        self.planes.insert(plane.id, plane);
    }

    /// Records that `kf` observes `mp` through keypoint `kp_index` and updates
    /// co-visibility counts against every other observer of `mp`.
    pub fn add_observation(&mut self, kf: KeyFrameId, mp: MapPointId, kp_index: usize) -> Result<(), GraphError> {
        if !self.map_points.contains_key(&mp) {
            return Err(GraphError::UnknownMapPoint(mp));
        }
        let frame = self.keyframes.get(&kf).ok_or(GraphError::UnknownKeyFrame(kf))?;
        if frame.observations.contains_key(&mp) {
            return Err(GraphError::DuplicateObservation { kf, mp });
        }
        if kp_index >= frame.keypoints.len() || frame.observations.values().any(|&i| i == kp_index) {
            return Err(GraphError::InvalidKeypoint { kf, index: kp_index });
        }
        self.keyframes.get_mut(&kf).unwrap().observations.insert(mp, kp_index);
        self.map_points.get_mut(&mp).unwrap().obs_count += 1;
        let obs = self.observers.entry(mp).or_default();
        let others: Vec<KeyFrameId> = obs.iter().copied().collect();
        obs.insert(kf);
        for other in others {
            *self.shared.entry(kf).or_default().entry(other).or_insert(0) += 1;
            *self.shared.entry(other).or_default().entry(kf).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Removes a keyframe and its observations. Map points left with no
    /// observations are deleted and returned in ascending id order.
    pub fn remove_keyframe(&mut self, kf: KeyFrameId) -> Result<Vec<MapPointId>, GraphError> {
        let frame = self.keyframes.remove(&kf).ok_or(GraphError::UnknownKeyFrame(kf))?;
        let mut deleted = Vec::new();
        for &mp in frame.observations.keys() {
            let others: Vec<KeyFrameId> = match self.observers.get_mut(&mp) {
                Some(obs) => {
                    obs.remove(&kf);
                    obs.iter().copied().collect()
                }
                None => Vec::new(),
            };
            if others.is_empty() {
                self.observers.remove(&mp);
            }
            for other in others {
                self.decrement_shared(other, kf);
            }
            if let Some(point) = self.map_points.get_mut(&mp) {
                point.obs_count -= 1;
                if point.obs_count == 0 {
                    self.map_points.remove(&mp);
                    deleted.push(mp);
                }
            }
        }
        if let Some(row) = self.shared.remove(&kf) {
            for other in row.keys() {
                if let Some(r) = self.shared.get_mut(other) {
                    r.remove(&kf);
                    if r.is_empty() {
                        self.shared.remove(other);
                    }
                }
            }
        }
        self.vo_keyframe.retain(|_, k| *k != kf);
        Ok(deleted)
    }

    fn decrement_shared(&mut self, a: KeyFrameId, b: KeyFrameId) {
        if let Some(row) = self.shared.get_mut(&a) {
            if let Some(c) = row.get_mut(&b) {
                *c -= 1;
                if *c == 0 {
                    row.remove(&b);
                }
            }
            if row.is_empty() {
                self.shared.remove(&a);
            }
        }
    }

    /// Number of map points observed by both keyframes.
    pub fn shared_count(&self, a: KeyFrameId, b: KeyFrameId) -> u32 {
        self.shared.get(&a).and_then(|r| r.get(&b)).copied().unwrap_or(0)
    }

    /// Co-visibility edges `(a, b, weight)` with `a < b`.
    pub fn covis_edges(&self) -> Vec<(KeyFrameId, KeyFrameId, u32)> {
        let th = self.config.covis_threshold;
        self.shared
            .iter()
            .flat_map(|(&a, row)| row.iter().filter(move |(&b, &w)| a < b && w >= th).map(move |(&b, &w)| (a, b, w)))
            .collect()
    }

    /// Co-visible neighbors by descending weight, ties by ascending id.
    pub fn covisible_keyframes(&self, kf: KeyFrameId, max_n: usize) -> Result<Vec<KeyFrameId>, GraphError> {
        if !self.keyframes.contains_key(&kf) {
            return Err(GraphError::UnknownKeyFrame(kf));
        }
        let th = self.config.covis_threshold;
        let mut nbrs: Vec<(KeyFrameId, u32)> = self
            .shared
            .get(&kf)
            .into_iter()
            .flatten()
            .filter(|(_, &w)| w >= th)
            .map(|(&k, &w)| (k, w))
            .collect();
        nbrs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(nbrs.into_iter().take(max_n).map(|(k, _)| k).collect())
    }

    /// Stores `vo` and moves it into the cell containing its position.
    pub fn attach_vo(&mut self, vo: VirtualObject) -> CellKey {
        let key = cell_of(&vo.position, self.config.cellsize);
        if let Some(old) = self.vo_cell.insert(vo.id, key) {
            if let Some(cell) = self.cells.get_mut(&old) {
                cell.vo_ids.remove(&vo.id);
            }
        }
        self.cells
            .entry(key)
            .or_insert_with(|| GridCell { key, vo_ids: BTreeSet::new() })
            .vo_ids
            .insert(vo.id);
        self.virtual_objects.insert(vo.id, vo);
        key
    }

    pub fn vo_cell(&self, id: VoId) -> Option<CellKey> {
        self.vo_cell.get(&id).copied()
    }

    /// Current state of every object residing in any of `keys`, by id.
    pub fn vos_in_cells<'a>(&self, keys: impl IntoIterator<Item = &'a CellKey>) -> Vec<VirtualObject> {
        let ids: BTreeSet<VoId> = keys
            .into_iter()
            .filter_map(|k| self.cells.get(k))
            .flat_map(|c| c.vo_ids.iter().copied())
            .collect();
        ids.into_iter().filter_map(|id| self.virtual_objects.get(&id).cloned()).collect()
    }

    /// Keyframe-baseline attachment (one keyframe per object).
    pub fn attach_vo_to_keyframe(&mut self, vo: VoId, kf: KeyFrameId) -> Result<(), GraphError> {
        if !self.virtual_objects.contains_key(&vo) {
            return Err(GraphError::UnknownVirtualObject(vo));
        }
        if !self.keyframes.contains_key(&kf) {
            return Err(GraphError::UnknownKeyFrame(kf));
        }
        self.vo_keyframe.insert(vo, kf);
        Ok(())
    }

    pub fn vo_keyframe(&self, vo: VoId) -> Option<KeyFrameId> {
        self.vo_keyframe.get(&vo).copied()
    }

    /// Objects attached to any of the given keyframes, by id.
    pub fn vos_of_keyframes(&self, kfs: &BTreeSet<KeyFrameId>) -> Vec<VirtualObject> {
        self.vo_keyframe
            .iter()
            .filter(|(_, kf)| kfs.contains(kf))
            .filter_map(|(vo, _)| self.virtual_objects.get(vo).cloned())
            .collect()
    }

    /// Full consistency check against brute-force recounts.
    pub fn verify(&self) -> Result<(), GraphError> {
        let fail = |m: String| Err(GraphError::Inconsistent(m));
        let mut counts: BTreeMap<MapPointId, u32> = BTreeMap::new();
        for kf in self.keyframes.values() {
            let mut used = BTreeSet::new();
            for (&mp, &idx) in &kf.observations {
                if !self.map_points.contains_key(&mp) {
                    return fail(format!("keyframe {} observes missing point {mp}", kf.id));
                }
                if !used.insert(idx) {
                    return fail(format!("keyframe {} reuses keypoint {idx}", kf.id));
                }
                *counts.entry(mp).or_default() += 1;
            }
        }
        for mp in self.map_points.values() {
            let c = counts.get(&mp.id).copied().unwrap_or(0);
            if mp.obs_count != c {
                return fail(format!("point {} obs_count {} != {c}", mp.id, mp.obs_count));
            }
        }
        let ids: Vec<KeyFrameId> = self.keyframes.keys().copied().collect();
        let th = self.config.covis_threshold;
        let mut brute = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            let oa = &self.keyframes[&a].observations;
            for &b in &ids[i + 1..] {
                let w = self.keyframes[&b].observations.keys().filter(|m| oa.contains_key(m)).count() as u32;
                if self.shared_count(a, b) != w || self.shared_count(b, a) != w {
                    return fail(format!("shared count ({a},{b}) {} != {w}", self.shared_count(a, b)));
                }
                if w >= th {
                    brute.push((a, b, w));
                }
            }
        }
        if brute != self.covis_edges() {
            return fail("co-visibility edges differ from recount".into());
        }
        for (&a, row) in &self.shared {
            if !self.keyframes.contains_key(&a) || row.keys().any(|b| !self.keyframes.contains_key(b)) {
                return fail(format!("dangling co-visibility entry at {a}"));
            }
        }
        for (id, vo) in &self.virtual_objects {
            let homes: Vec<&CellKey> = self.cells.values().filter(|c| c.vo_ids.contains(id)).map(|c| &c.key).collect();
            let expect = cell_of(&vo.position, self.config.cellsize);
            if homes != vec![&expect] || self.vo_cell.get(id) != Some(&expect) {
                return fail(format!("object {id} resides in {homes:?}, expected {expect:?}"));
            }
        }
        for cell in self.cells.values() {
            if cell.vo_ids.iter().any(|v| !self.virtual_objects.contains_key(v)) {
                return fail(format!("cell {:?} lists a missing object", cell.key));
            }
        }
        for (vo, kf) in &self.vo_keyframe {
            if !self.keyframes.contains_key(kf) || !self.virtual_objects.contains_key(vo) {
                return fail(format!("dangling keyframe attachment {vo}->{kf}"));
            }
        }
        Ok(())
    }

    /// Debug dump used for test fixtures.
    pub fn to_debug_json(&self) -> serde_json::Value {
        serde_json::to_value(DebugDump {
            config: self.config,
            map_points: self.map_points.values().cloned().collect(),
            keyframes: self.keyframes.values().cloned().collect(),
            planes: self.planes.values().cloned().collect(),
            cells: self.cells.values().filter(|c| !c.vo_ids.is_empty()).cloned().collect(),
            virtual_objects: self.virtual_objects.values().cloned().collect(),
        })
        .expect("graph serializes")
    }

    /// Rebuilds a graph from [`to_debug_json`](Self::to_debug_json) output.
    /// Observation counts and co-visibility are recomputed; cells are
    /// re-derived from object positions.
    pub fn from_debug_json(value: &serde_json::Value) -> Result<Self, GraphError> {
        let dump: DebugDump =
            serde_json::from_value(value.clone()).map_err(|e| GraphError::Inconsistent(e.to_string()))?;
        let mut g = GlobalGraph::new(dump.config);
        for mp in dump.map_points {
            g.insert_map_point(mp)?;
        }
        for kf in dump.keyframes {
            g.insert_keyframe(kf)?;
        }
        for p in dump.planes {
            g.upsert_plane(p);
        }
        for vo in dump.virtual_objects {
            g.attach_vo(vo);
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
struct DebugDump {
    config: GraphConfig,
    map_points: Vec<MapPoint>,
    keyframes: Vec<KeyFrame>,
    planes: Vec<Plane>,
    cells: Vec<GridCell>,
    virtual_objects: Vec<VirtualObject>,
}

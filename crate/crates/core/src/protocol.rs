//! Binary wire format.
//!
//! Every message is a 22-byte header followed by a payload. Integers are
//! little-endian, floats are IEEE-754 binary32 little-endian.
//!
//! ```text
//! header   magic "ECAR" | version u8 = 1 | msg_type u8 | device_id u32 | seq u64 | payload_len u32
//! type 1   FrameUpload     frame_id u64 | timestamp_us u64 | quality u8 | kp_count u16 | kp_count x 45 B
//! type 2   LocalGraphDown  pose 12 x f32 | mp_count u16 | points | plane_count u8 | 21 B each
//!                          | vo_count u16 | per VO: id u64, pos 3 x f32, version u32, len u16, bytes
//! type 3   Interaction     vo_id u64 | op u8 | position 3 x f32 | payload_len u16 | bytes
//! type 4   Ack             (empty)
//! ```
//!
//! Map points in a local graph come in two layouts: the decoupled one (33 B:
//! id, position, observed pixel, angle, octave) and the full one that also
//! carries the descriptor, normal and distance bounds (85 B). The header does
//! not say which; [`decode`] picks the layout that consumes the payload
//! exactly, trying the decoupled one first. [`decode_as`] takes it
//! explicitly.

use thiserror::Error;

use crate::features::{Descriptor, Keypoint};
use crate::geometry::Pose;
use crate::graph::{Plane, PlaneLabel};
use crate::{Mat3, Vec3};

pub const MAGIC: [u8; 4] = *b"ECAR";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 22;
pub const KEYPOINT_LEN: usize = 45;
pub const POSE_LEN: usize = 48;
pub const POINT_LEN_DECOUPLED: usize = 33;
pub const POINT_LEN_FULL: usize = 85;
pub const PLANE_LEN: usize = 21;
const FRAME_FIXED_LEN: usize = 19;
const VO_FIXED_LEN: usize = 26;
const INTERACTION_FIXED_LEN: usize = 23;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("bad magic at offset {offset}")]
    BadMagic { offset: usize },
    #[error("unknown version {version} at offset {offset}")]
    UnknownVersion { offset: usize, version: u8 },
    #[error("unknown message type {msg_type} at offset {offset}")]
    UnknownMessageType { offset: usize, msg_type: u8 },
    #[error("truncated payload: need {needed} bytes at offset {offset}")]
    TruncatedPayload { offset: usize, needed: usize },
    #[error("count mismatch at offset {offset}: {detail}")]
    CountMismatch { offset: usize, detail: String },
    #[error("invalid field at offset {offset}: {detail}")]
    InvalidField { offset: usize, detail: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("structurally invalid message: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageType {
    FrameUpload = 1,
    LocalGraphDown = 2,
    Interaction = 3,
    Ack = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLayout {
    Decoupled,
    Full,
}

impl PointLayout {
    pub fn record_len(self) -> usize {
        match self {
            PointLayout::Decoupled => POINT_LEN_DECOUPLED,
            PointLayout::Full => POINT_LEN_FULL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub device_id: u32,
    pub seq: u64,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    FrameUpload(FrameUpload),
    LocalGraphDown(LocalGraphDown),
    Interaction(InteractionMessage),
    Ack,
}

impl Message {
    pub fn msg_type(&self) -> MessageType {
        match self {
            Message::FrameUpload(_) => MessageType::FrameUpload,
            Message::LocalGraphDown(_) => MessageType::LocalGraphDown,
            Message::Interaction(_) => MessageType::Interaction,
            Message::Ack => MessageType::Ack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WireKeypoint {
    pub u: f32,
    pub v: f32,
    pub angle: f32,
    pub octave: u8,
    pub descriptor: Descriptor,
}

impl From<&Keypoint> for WireKeypoint {
    fn from(k: &Keypoint) -> Self {
        Self { u: k.u as f32, v: k.v as f32, angle: k.angle as f32, octave: k.octave, descriptor: k.descriptor }
    }
}

impl From<&WireKeypoint> for Keypoint {
    fn from(k: &WireKeypoint) -> Self {
        Self { u: k.u as f64, v: k.v as f64, angle: k.angle as f64, octave: k.octave, descriptor: k.descriptor }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameUpload {
    pub frame_id: u64,
    pub timestamp_us: u64,
    /// 10, 20, ..., 100.
    pub quality: u8,
    pub keypoints: Vec<WireKeypoint>,
}

impl FrameUpload {
    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.keypoints.iter().map(Keypoint::from).collect()
    }
}

pub fn valid_quality(q: u8) -> bool {
    (10..=100).contains(&q) && q % 10 == 0
}

/// Rotation row-major then translation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WirePose {
    pub rotation: [f32; 9],
    pub translation: [f32; 3],
}

impl From<&Pose> for WirePose {
    fn from(p: &Pose) -> Self {
        let mut rotation = [0f32; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = p.rotation[(r, c)] as f32;
            }
        }
        Self { rotation, translation: vec3_f32(&p.translation) }
    }
}

impl WirePose {
    /// Widened to f64 and re-orthonormalized to absorb f32 rounding.
    pub fn to_pose(&self) -> Pose {
        let r = Mat3::from_fn(|r, c| self.rotation[r * 3 + c] as f64);
        Pose { rotation: r, translation: vec3_f64(&self.translation) }.orthonormalized()
    }
}

pub fn vec3_f32(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

pub fn vec3_f64(v: &[f32; 3]) -> Vec3 {
    Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
}

/// Extra per-point fields of the full layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullPointData {
    pub descriptor: Descriptor,
    pub normal: [f32; 3],
    pub dist_min: f32,
    pub dist_max: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphPoint {
    pub id: u64,
    pub position: [f32; 3],
    pub obs_u: f32,
    pub obs_v: f32,
    pub angle: f32,
    pub octave: u8,
    pub full: Option<FullPointData>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WirePlane {
    pub id: u32,
    pub label: PlaneLabel,
    pub normal: [f32; 3],
    pub offset: f32,
}

impl From<&Plane> for WirePlane {
    fn from(p: &Plane) -> Self {
        Self { id: p.id, label: p.label, normal: vec3_f32(&p.normal), offset: p.offset as f32 }
    }
}

impl WirePlane {
    pub fn to_plane(&self) -> Plane {
        let n = vec3_f64(&self.normal);
        let len = n.norm();
        let (normal, offset) = if len > 0.0 { (n / len, self.offset as f64 / len) } else { (n, self.offset as f64) };
        Plane { id: self.id, label: self.label, normal, offset }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireVo {
    pub id: u64,
    pub position: [f32; 3],
    pub version: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalGraphDown {
    pub pose: WirePose,
    pub points: Vec<GraphPoint>,
    pub planes: Vec<WirePlane>,
    pub vos: Vec<WireVo>,
}

impl LocalGraphDown {
    /// Layout of the point records; `None` for an empty list.
    pub fn layout(&self) -> Option<PointLayout> {
        self.points.first().map(|p| if p.full.is_some() { PointLayout::Full } else { PointLayout::Decoupled })
    }

    /// Alignment failed on the server side.
    pub fn is_lost(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InteractionOp {
    Registration = 0,
    Manipulation = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMessage {
    /// 0 asks the server to allocate an id (Registration only).
    pub vo_id: u64,
    pub op: InteractionOp,
    pub position: [f32; 3],
    pub payload: Vec<u8>,
}

impl InteractionMessage {
    pub fn registration(position: &Vec3, payload: Vec<u8>) -> Self {
        Self { vo_id: 0, op: InteractionOp::Registration, position: vec3_f32(position), payload }
    }

    pub fn manipulation(vo_id: u64, position: &Vec3, payload: Vec<u8>) -> Self {
        Self { vo_id, op: InteractionOp::Manipulation, position: vec3_f32(position), payload }
    }
}

fn validate(msg: &Message) -> Result<(), EncodeError> {
    let bad = |s: &str| Err(EncodeError::Invalid(s.to_string()));
    match msg {
        Message::FrameUpload(f) => {
            if !valid_quality(f.quality) {
                return bad("quality must be one of 10, 20, ..., 100");
            }
            if f.keypoints.len() > u16::MAX as usize {
                return bad("too many keypoints");
            }
        }
        Message::LocalGraphDown(g) => {
            if g.points.len() > u16::MAX as usize || g.planes.len() > u8::MAX as usize || g.vos.len() > u16::MAX as usize {
                return bad("list too long for its count field");
            }
            let full = g.points.first().map(|p| p.full.is_some());
            if g.points.iter().any(|p| Some(p.full.is_some()) != full) {
                return bad("mixed point layouts");
            }
            if g.vos.iter().any(|v| v.payload.len() > u16::MAX as usize) {
                return bad("payload too long");
            }
        }
        Message::Interaction(i) => {
            if i.op == InteractionOp::Registration && i.vo_id != 0 {
                return bad("registration must carry vo_id 0");
            }
            if i.payload.len() > u16::MAX as usize {
                return bad("payload too long");
            }
        }
        Message::Ack => {}
    }
    Ok(())
}

fn payload_size(msg: &Message) -> usize {
    match msg {
        Message::FrameUpload(f) => FRAME_FIXED_LEN + KEYPOINT_LEN * f.keypoints.len(),
        Message::LocalGraphDown(g) => {
            let point_len = g.layout().map_or(0, PointLayout::record_len);
            POSE_LEN
                + 2
                + point_len * g.points.len()
                + 1
                + PLANE_LEN * g.planes.len()
                + 2
                + g.vos.iter().map(|v| VO_FIXED_LEN + v.payload.len()).sum::<usize>()
        }
        Message::Interaction(i) => INTERACTION_FIXED_LEN + i.payload.len(),
        Message::Ack => 0,
    }
}

/// Encoded length in bytes, computed without encoding.
pub fn message_size(msg: &Message) -> usize {
    HEADER_LEN + payload_size(msg)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|&x| self.f32(x));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>, EncodeError> {
    validate(&env.message)?;
    let payload_len = payload_size(&env.message);
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + payload_len));
    w.bytes(&MAGIC);
    w.u8(VERSION);
    w.u8(env.message.msg_type() as u8);
    w.u32(env.device_id);
    w.u64(env.seq);
    w.u32(payload_len as u32);
    match &env.message {
        Message::FrameUpload(f) => {
            w.u64(f.frame_id);
            w.u64(f.timestamp_us);
            w.u8(f.quality);
            w.u16(f.keypoints.len() as u16);
            for k in &f.keypoints {
                w.f32(k.u);
                w.f32(k.v);
                w.f32(k.angle);
                w.u8(k.octave);
                w.bytes(&k.descriptor.0);
            }
        }
        Message::LocalGraphDown(g) => {
            w.f32s(&g.pose.rotation);
            w.f32s(&g.pose.translation);
            w.u16(g.points.len() as u16);
            for p in &g.points {
                w.u64(p.id);
                w.f32s(&p.position);
                w.f32(p.obs_u);
                w.f32(p.obs_v);
                w.f32(p.angle);
                w.u8(p.octave);
                if let Some(full) = &p.full {
                    w.bytes(&full.descriptor.0);
                    w.f32s(&full.normal);
                    w.f32(full.dist_min);
                    w.f32(full.dist_max);
                }
            }
            w.u8(g.planes.len() as u8);
            for p in &g.planes {
                w.u32(p.id);
                w.u8(p.label.to_u8());
                w.f32s(&p.normal);
                w.f32(p.offset);
            }
            w.u16(g.vos.len() as u16);
            for v in &g.vos {
                w.u64(v.id);
                w.f32s(&v.position);
                w.u32(v.version);
                w.u16(v.payload.len() as u16);
                w.bytes(&v.payload);
            }
        }
        Message::Interaction(i) => {
            w.u64(i.vo_id);
            w.u8(i.op as u8);
            w.f32s(&i.position);
            w.u16(i.payload.len() as u16);
            w.bytes(&i.payload);
        }
        Message::Ack => {}
    }
    debug_assert_eq!(w.0.len(), HEADER_LEN + payload_len);
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() - self.pos < n {
            return Err(CodecError::TruncatedPayload { offset: self.pos, needed: n });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32x3(&mut self) -> Result<[f32; 3], CodecError> {
        Ok([self.f32()?, self.f32()?, self.f32()?])
    }
    fn descriptor(&mut self) -> Result<Descriptor, CodecError> {
        Ok(Descriptor(self.take(32)?.try_into().unwrap()))
    }
    /// Fails early when `count` records of `each` bytes cannot fit.
    fn ensure(&self, count: usize, each: usize) -> Result<(), CodecError> {
        let need = count * each;
        if self.buf.len() - self.pos < need {
            return Err(CodecError::TruncatedPayload { offset: self.pos, needed: need });
        }
        Ok(())
    }
}

struct Header {
    msg_type: u8,
    device_id: u32,
    seq: u64,
    payload_len: usize,
}

fn decode_header(bytes: &[u8]) -> Result<Header, CodecError> {
    if bytes.len() >= 4 && bytes[..4] != MAGIC {
        return Err(CodecError::BadMagic { offset: 0 });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::TruncatedPayload { offset: bytes.len(), needed: HEADER_LEN - bytes.len() });
    }
    if bytes[4] != VERSION {
        return Err(CodecError::UnknownVersion { offset: 4, version: bytes[4] });
    }
    let mut r = Reader { buf: bytes, pos: 5 };
    let msg_type = r.u8()?;
    if !(1..=4).contains(&msg_type) {
        return Err(CodecError::UnknownMessageType { offset: 5, msg_type });
    }
    let device_id = r.u32()?;
    let seq = r.u64()?;
    let payload_len = r.u32()? as usize;
    let have = bytes.len() - HEADER_LEN;
    if have < payload_len {
        return Err(CodecError::TruncatedPayload { offset: bytes.len(), needed: payload_len - have });
    }
    if have > payload_len {
        return Err(CodecError::CountMismatch {
            offset: HEADER_LEN + payload_len,
            detail: format!("{} trailing bytes after declared payload", have - payload_len),
        });
    }
    Ok(Header { msg_type, device_id, seq, payload_len })
}

/// Decodes one message; local graphs are tried in the decoupled layout first.
pub fn decode(bytes: &[u8]) -> Result<Envelope, CodecError> {
    let header = decode_header(bytes)?;
    if header.msg_type == MessageType::LocalGraphDown as u8 {
        match decode_body(bytes, &header, PointLayout::Decoupled) {
            Ok(env) => Ok(env),
            Err(first) => decode_body(bytes, &header, PointLayout::Full).map_err(|_| first),
        }
    } else {
        decode_body(bytes, &header, PointLayout::Decoupled)
    }
}

/// Decodes with an explicit local-graph point layout.
pub fn decode_as(bytes: &[u8], layout: PointLayout) -> Result<Envelope, CodecError> {
    let header = decode_header(bytes)?;
    decode_body(bytes, &header, layout)
}

fn decode_body(bytes: &[u8], h: &Header, layout: PointLayout) -> Result<Envelope, CodecError> {
    // Bounded to the declared payload so nothing past it is ever read.
    let mut r = Reader { buf: &bytes[..HEADER_LEN + h.payload_len], pos: HEADER_LEN };
    let message = match h.msg_type {
        1 => {
            let frame_id = r.u64()?;
            let timestamp_us = r.u64()?;
            let qpos = r.pos;
            let quality = r.u8()?;
            if !valid_quality(quality) {
                return Err(CodecError::InvalidField { offset: qpos, detail: format!("quality {quality}") });
            }
            let n = r.u16()? as usize;
            r.ensure(n, KEYPOINT_LEN)?;
            let mut keypoints = Vec::with_capacity(n);
            for _ in 0..n {
                keypoints.push(WireKeypoint {
                    u: r.f32()?,
                    v: r.f32()?,
                    angle: r.f32()?,
                    octave: r.u8()?,
                    descriptor: r.descriptor()?,
                });
            }
            Message::FrameUpload(FrameUpload { frame_id, timestamp_us, quality, keypoints })
        }
        2 => {
            let mut rotation = [0f32; 9];
            for v in rotation.iter_mut() {
                *v = r.f32()?;
            }
            let pose = WirePose { rotation, translation: r.f32x3()? };
            let n = r.u16()? as usize;
            r.ensure(n, layout.record_len())?;
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                let mut p = GraphPoint {
                    id: r.u64()?,
                    position: r.f32x3()?,
                    obs_u: r.f32()?,
                    obs_v: r.f32()?,
                    angle: r.f32()?,
                    octave: r.u8()?,
                    full: None,
                };
                if layout == PointLayout::Full {
                    p.full = Some(FullPointData {
                        descriptor: r.descriptor()?,
                        normal: r.f32x3()?,
                        dist_min: r.f32()?,
                        dist_max: r.f32()?,
                    });
                }
                points.push(p);
            }
            let np = r.u8()? as usize;
            r.ensure(np, PLANE_LEN)?;
            let mut planes = Vec::with_capacity(np);
            for _ in 0..np {
                let id = r.u32()?;
                let lpos = r.pos;
                let label = PlaneLabel::from_u8(r.u8()?)
                    .ok_or_else(|| CodecError::InvalidField { offset: lpos, detail: "plane label".into() })?;
                planes.push(WirePlane { id, label, normal: r.f32x3()?, offset: r.f32()? });
            }
            let nv = r.u16()? as usize;
            r.ensure(nv, VO_FIXED_LEN)?;
            let mut vos = Vec::with_capacity(nv);
            for _ in 0..nv {
                let id = r.u64()?;
                let position = r.f32x3()?;
                let version = r.u32()?;
                let len = r.u16()? as usize;
                vos.push(WireVo { id, position, version, payload: r.take(len)?.to_vec() });
            }
            Message::LocalGraphDown(LocalGraphDown { pose, points, planes, vos })
        }
        3 => {
            let vo_id = r.u64()?;
            let opos = r.pos;
            let op = match r.u8()? {
                0 => InteractionOp::Registration,
                1 => InteractionOp::Manipulation,
                other => {
                    return Err(CodecError::InvalidField { offset: opos, detail: format!("operation {other}") })
                }
            };
            if op == InteractionOp::Registration && vo_id != 0 {
                return Err(CodecError::InvalidField { offset: HEADER_LEN, detail: "registration with vo_id".into() });
            }
            let position = r.f32x3()?;
            let len = r.u16()? as usize;
            let payload = r.take(len)?.to_vec();
            Message::Interaction(InteractionMessage { vo_id, op, position, payload })
        }
        _ => Message::Ack,
    };
    if r.pos != r.buf.len() {
        return Err(CodecError::CountMismatch {
            offset: r.pos,
            detail: format!("payload_len {} but records end at {}", h.payload_len, r.pos - HEADER_LEN),
        });
    }
    Ok(Envelope { device_id: h.device_id, seq: h.seq, message })
}

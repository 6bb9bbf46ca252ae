//! Strategies and brute-force oracles shared by the property suite and the
//! acceptance runner.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ecar::features::{Descriptor, Keypoint};
use ecar::geometry::{cell_of, project, ray_plane_distance, reprojection_jacobian, CameraIntrinsics, Ray};
use ecar::graph::{GraphConfig, KeyFrame, PlaneLabel, VoPayload};
use ecar::protocol::{
    decode, encode, message_size, CodecError, FrameUpload, FullPointData, GraphPoint, InteractionMessage, InteractionOp,
    LocalGraphDown, WireKeypoint, WirePlane, WirePose, WireVo,
};
use ecar::{DeviceClient, Envelope, GlobalGraph, MapPoint, Message, Plane, Pose, Vec3, VirtualObject};
use nalgebra::{Rotation3, Vector2};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

// ---------------------------------------------------------------- codec

pub fn descriptor() -> impl Strategy<Value = Descriptor> {
    prop::array::uniform32(any::<u8>()).prop_map(Descriptor)
}

fn f() -> impl Strategy<Value = f32> {
    -1.0e4f32..1.0e4f32
}

fn f3() -> impl Strategy<Value = [f32; 3]> {
    [f(), f(), f()]
}

pub fn wire_keypoint() -> impl Strategy<Value = WireKeypoint> {
    (f(), f(), f(), any::<u8>(), descriptor())
        .prop_map(|(u, v, angle, octave, descriptor)| WireKeypoint { u, v, angle, octave, descriptor })
}

fn quality() -> impl Strategy<Value = u8> {
    (1u8..=10).prop_map(|q| q * 10)
}

pub fn frame_upload(max_kps: usize) -> impl Strategy<Value = FrameUpload> {
    (any::<u64>(), any::<u64>(), quality(), prop::collection::vec(wire_keypoint(), 0..=max_kps))
        .prop_map(|(frame_id, timestamp_us, quality, keypoints)| FrameUpload { frame_id, timestamp_us, quality, keypoints })
}

fn wire_pose() -> impl Strategy<Value = WirePose> {
    (prop::array::uniform9(f()), f3()).prop_map(|(rotation, translation)| WirePose { rotation, translation })
}

fn full_data() -> impl Strategy<Value = FullPointData> {
    (descriptor(), f3(), f(), f()).prop_map(|(descriptor, normal, dist_min, dist_max)| FullPointData {
        descriptor,
        normal,
        dist_min,
        dist_max,
    })
}

fn graph_point(full: bool) -> BoxedStrategy<GraphPoint> {
    let base = (any::<u64>(), f3(), f(), f(), f(), any::<u8>());
    if full {
        (base, full_data())
            .prop_map(|((id, position, obs_u, obs_v, angle, octave), fd)| GraphPoint {
                id,
                position,
                obs_u,
                obs_v,
                angle,
                octave,
                full: Some(fd),
            })
            .boxed()
    } else {
        base.prop_map(|(id, position, obs_u, obs_v, angle, octave)| GraphPoint {
            id,
            position,
            obs_u,
            obs_v,
            angle,
            octave,
            full: None,
        })
        .boxed()
    }
}

fn wire_plane() -> impl Strategy<Value = WirePlane> {
    let label = prop_oneof![Just(PlaneLabel::Floor), Just(PlaneLabel::Wall), Just(PlaneLabel::Ceiling)];
    (any::<u32>(), label, f3(), f()).prop_map(|(id, label, normal, offset)| WirePlane { id, label, normal, offset })
}

fn wire_vo() -> impl Strategy<Value = WireVo> {
    (any::<u64>(), f3(), any::<u32>(), prop::collection::vec(any::<u8>(), 0..64))
        .prop_map(|(id, position, version, payload)| WireVo { id, position, version, payload })
}

pub fn local_graph(max_points: usize) -> impl Strategy<Value = LocalGraphDown> {
    any::<bool>().prop_flat_map(move |full| {
        (
            wire_pose(),
            prop::collection::vec(graph_point(full), 0..=max_points),
            prop::collection::vec(wire_plane(), 0..8),
            prop::collection::vec(wire_vo(), 0..8),
        )
            .prop_map(|(pose, points, planes, vos)| LocalGraphDown { pose, points, planes, vos })
    })
}

pub fn interaction() -> impl Strategy<Value = InteractionMessage> {
    let payload = prop::collection::vec(any::<u8>(), 0..128);
    prop_oneof![
        (f3(), payload.clone()).prop_map(|(position, payload)| InteractionMessage {
            vo_id: 0,
            op: InteractionOp::Registration,
            position,
            payload,
        }),
        (1u64.., f3(), payload).prop_map(|(vo_id, position, payload)| InteractionMessage {
            vo_id,
            op: InteractionOp::Manipulation,
            position,
            payload,
        }),
    ]
}

pub fn message() -> impl Strategy<Value = Message> {
    prop_oneof![
        frame_upload(48).prop_map(Message::FrameUpload),
        local_graph(48).prop_map(Message::LocalGraphDown),
        interaction().prop_map(Message::Interaction),
        Just(Message::Ack),
    ]
}

pub fn envelope() -> impl Strategy<Value = Envelope> {
    (any::<u32>(), any::<u64>(), message()).prop_map(|(device_id, seq, message)| Envelope { device_id, seq, message })
}

/// Round trip, predicted size, deterministic bytes, and every strict prefix
/// rejected as truncated.
pub fn check_codec(env: &Envelope) -> Result<(), TestCaseError> {
    let bytes = encode(env).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(bytes.len(), message_size(&env.message));
    prop_assert_eq!(&encode(env).unwrap(), &bytes);
    prop_assert_eq!(&decode(&bytes).map_err(|e| TestCaseError::fail(e.to_string()))?, env);
    for cut in 0..bytes.len() {
        match decode(&bytes[..cut]) {
            Err(CodecError::TruncatedPayload { .. }) => {}
            other => return Err(TestCaseError::fail(format!("prefix {cut}: {other:?}"))),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- graph

#[derive(Debug, Clone)]
pub enum GraphOp {
    /// Insert a keyframe observing these pool points.
    Add(BTreeSet<u64>),
    /// Remove the live keyframe at this index (modulo live count).
    Remove(usize),
}

pub fn graph_ops(pool: u64, max_ops: usize) -> impl Strategy<Value = Vec<GraphOp>> {
    let add = prop::collection::btree_set(0..pool, 1..40).prop_map(GraphOp::Add);
    let remove = any::<usize>().prop_map(GraphOp::Remove);
    prop::collection::vec(prop_oneof![3 => add, 1 => remove], 1..=max_ops)
}

fn dummy_keypoints(n: usize) -> Vec<Keypoint> {
    (0..n)
        .map(|i| Keypoint { u: i as f64, v: 0.0, angle: 0.0, octave: 0, descriptor: Descriptor([0; 32]) })
        .collect()
}

/// Applies `ops` to a graph with at most `max_kfs` live keyframes and checks
/// refcounts, deletions, shared counts and covis edges against recounts from
/// a plain model after every step.
pub fn check_graph_ops(ops: &[GraphOp], threshold: u32, max_kfs: usize) -> Result<(), TestCaseError> {
    let mut g = GlobalGraph::new(GraphConfig { covis_threshold: threshold, cellsize: 0.1 });
    let mut model: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    let mut next_kf = 1u64;
    for op in ops {
        match op {
            GraphOp::Add(points) if model.len() < max_kfs => {
                for &mp in points {
                    if g.map_point(mp).is_none() {
                        g.insert_map_point(MapPoint::new(mp, Vec3::new(mp as f64, 0.0, 1.0))).unwrap();
                    }
                }
                let mut kf = KeyFrame::new(next_kf, Pose::identity(), dummy_keypoints(points.len()));
                kf.observations = points.iter().enumerate().map(|(i, &mp)| (mp, i)).collect();
                g.insert_keyframe(kf).map_err(|e| TestCaseError::fail(e.to_string()))?;
                model.insert(next_kf, points.clone());
                next_kf += 1;
            }
            GraphOp::Add(_) => {}
            GraphOp::Remove(i) => {
                if model.is_empty() {
                    continue;
                }
                let id = *model.keys().nth(i % model.len()).unwrap();
                let removed = model.remove(&id).unwrap();
                let mut expect: Vec<u64> =
                    removed.into_iter().filter(|mp| model.values().all(|s| !s.contains(mp))).collect();
                expect.sort_unstable();
                prop_assert_eq!(g.remove_keyframe(id).map_err(|e| TestCaseError::fail(e.to_string()))?, expect);
            }
        }
        compare_graph(&g, &model, threshold)?;
    }
    Ok(())
}

fn compare_graph(g: &GlobalGraph, model: &BTreeMap<u64, BTreeSet<u64>>, threshold: u32) -> Result<(), TestCaseError> {
    let mut counts: BTreeMap<u64, u32> = BTreeMap::new();
    for pts in model.values() {
        for &mp in pts {
            *counts.entry(mp).or_default() += 1;
        }
    }
    let stored: Vec<(u64, u32)> = g.map_points().values().map(|p| (p.id, p.obs_count)).collect();
    prop_assert_eq!(stored, counts.into_iter().collect::<Vec<_>>());
    let ids: Vec<u64> = model.keys().copied().collect();
    let mut edges = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let shared = model[&a].intersection(&model[&b]).count() as u32;
            prop_assert_eq!(g.shared_count(a, b), shared);
            prop_assert_eq!(g.shared_count(b, a), shared);
            if shared >= threshold {
                edges.push((a, b, shared));
            }
        }
    }
    prop_assert_eq!(g.covis_edges(), edges);
    g.verify().map_err(|e| TestCaseError::fail(e.to_string()))?;
    Ok(())
}

pub fn vo_moves() -> impl Strategy<Value = Vec<(u64, [f64; 3])>> {
    prop::collection::vec((1u64..12, prop::array::uniform3(-50.0f64..50.0)), 1..200)
}

/// Every object sits in exactly one cell, the one containing its position.
pub fn check_single_residence(moves: &[(u64, [f64; 3])]) -> Result<(), TestCaseError> {
    let mut g = GlobalGraph::default();
    let cellsize = g.config().cellsize;
    for (version, &(id, p)) in moves.iter().enumerate() {
        let position = Vec3::from(p);
        g.attach_vo(VirtualObject {
            id,
            position,
            version: version as u32 + 1,
            owner_device: 0,
            payload: VoPayload::Opaque(Vec::new()),
        });
        for vo in g.virtual_objects().values() {
            let holders: Vec<_> = g.cells().values().filter(|c| c.vo_ids.contains(&vo.id)).map(|c| c.key).collect();
            prop_assert_eq!(holders, vec![cell_of(&vo.position, cellsize)]);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- device queue

/// One synthetic reply: ids with positions, and whether the device holds a
/// keypoint at the observation pixel.
#[derive(Debug, Clone)]
pub struct Reply {
    pub points: Vec<(u64, [f32; 3], bool)>,
}

pub fn replies(n: usize) -> impl Strategy<Value = Vec<Reply>> {
    let point = (prop::array::uniform3(-5.0f32..5.0), prop::bool::weighted(0.8));
    let reply = prop::collection::btree_map(0u64..120, point, 0..60)
        .prop_map(|m| Reply { points: m.into_iter().map(|(id, (p, bound))| (id, p, bound)).collect() });
    prop::collection::vec(reply, 1..=n)
}

fn pixel_of(slot: usize) -> (f32, f32) {
    // 10 px lattice so no keypoint is within rebinding range of another slot.
    (10.0 + 10.0 * (slot % 60) as f32, 10.0 + 10.0 * (slot / 60) as f32)
}

fn descriptor_for(seq: u64, id: u64) -> Descriptor {
    let mut d = [0u8; 32];
    d[..8].copy_from_slice(&seq.to_le_bytes());
    d[8..16].copy_from_slice(&id.to_le_bytes());
    Descriptor(d)
}

/// Feeds the replies through a device and compares its point store with one
/// rebuilt from the last `queue_len` replies alone.
pub fn check_queue_replay(replies: &[Reply], queue_len: usize) -> Result<(), TestCaseError> {
    let cfg = ecar::ClientConfig { queue_len, ..Default::default() };
    let mut dev = DeviceClient::new(1, cfg).unwrap();
    let mut seqs = Vec::new();
    for (n, reply) in replies.iter().enumerate() {
        let keypoints: Vec<Keypoint> = reply
            .points
            .iter()
            .enumerate()
            .filter(|(_, (_, _, bound))| *bound)
            .map(|(slot, (id, _, _))| {
                let (u, v) = pixel_of(slot);
                Keypoint { u: u as f64, v: v as f64, angle: 0.0, octave: 0, descriptor: descriptor_for(n as u64, *id) }
            })
            .collect();
        let env = dev.make_upload(n as u64, 0, &keypoints);
        let points = reply
            .points
            .iter()
            .enumerate()
            .map(|(slot, &(id, position, _))| {
                let (obs_u, obs_v) = pixel_of(slot);
                GraphPoint { id, position, obs_u, obs_v, angle: 0.0, octave: 0, full: None }
            })
            .collect();
        let down = LocalGraphDown { pose: WirePose::from(&Pose::identity()), points, planes: vec![], vos: vec![] };
        dev.apply_local_graph(env.seq, &down).map_err(|e| TestCaseError::fail(e.to_string()))?;
        seqs.push(env.seq);

        let keep = queue_len.min(n + 1);
        let window = &replies[n + 1 - keep..=n];
        let queued: Vec<u64> = dev.local_graph().keyframes().iter().map(|k| k.seq).collect();
        prop_assert_eq!(&queued[..], &seqs[seqs.len() - keep..]);

        let mut expect: BTreeMap<u64, (u32, [f32; 3], Descriptor)> = BTreeMap::new();
        for (k, r) in window.iter().enumerate() {
            let seq_index = (n + 1 - keep + k) as u64;
            for &(id, p, bound) in &r.points {
                if bound {
                    let e = expect.entry(id).or_insert((0, p, Descriptor([0; 32])));
                    e.0 += 1;
                    e.1 = p;
                    e.2 = descriptor_for(seq_index, id);
                }
            }
        }
        let got: BTreeMap<u64, (u32, [f32; 3], Descriptor)> = dev
            .local_graph()
            .map_points()
            .values()
            .map(|p| (p.id, (p.obs_count, ecar::protocol::vec3_f32(&p.position), p.descriptor)))
            .collect();
        prop_assert_eq!(got, expect);
        dev.local_graph().verify().map_err(TestCaseError::fail)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- geometry

/// Camera pose with a random rotation and a point in front of it.
pub fn camera_and_point() -> impl Strategy<Value = (Pose, Vec3)> {
    (
        prop::array::uniform3(-3.0f64..3.0),
        prop::array::uniform3(-5.0f64..5.0),
        prop::array::uniform2(-0.4f64..0.4),
        0.5f64..20.0,
    )
        .prop_map(|(axis_angle, center, xy, depth)| {
            let r = Rotation3::new(Vec3::from(axis_angle)).into_inner();
            let pose = Pose::from_center(r, Vec3::from(center));
            let cam = Vec3::new(xy[0] * depth, xy[1] * depth, depth);
            let world = r.transpose() * cam + pose.center();
            (pose, world)
        })
}

/// Analytic 2x6 Jacobian against central differences with step 1e-6.
pub fn check_jacobian(pose: &Pose, world: &Vec3) -> Result<(), TestCaseError> {
    let k = CameraIntrinsics::vga();
    let j = reprojection_jacobian(&k, pose, world).ok_or_else(|| TestCaseError::fail("point behind camera"))?;
    let h = 1e-6;
    for c in 0..6 {
        let mut e = [0.0; 6];
        e[c] = h;
        let plus = pose.perturbed(&Vec3::new(e[0], e[1], e[2]), &Vec3::new(e[3], e[4], e[5]));
        let minus = pose.perturbed(&Vec3::new(-e[0], -e[1], -e[2]), &Vec3::new(-e[3], -e[4], -e[5]));
        let fd: Vector2<f64> = (project(&k, &plus, world).unwrap() - project(&k, &minus, world).unwrap()) / (2.0 * h);
        let an = j.column(c).into_owned();
        let scale = an.norm().max(fd.norm()).max(1.0);
        prop_assert!((an - fd).norm() / scale < 1e-4, "column {c}: analytic {an:?} fd {fd:?}");
    }
    Ok(())
}

pub fn ray_and_plane() -> impl Strategy<Value = (Ray, Plane)> {
    (
        prop::array::uniform3(-10.0f64..10.0),
        prop::array::uniform3(-1.0f64..1.0),
        prop::array::uniform3(-1.0f64..1.0),
        -10.0f64..10.0,
    )
        .prop_filter("non-degenerate directions", |(_, d, n, _)| Vec3::from(*d).norm() > 0.1 && Vec3::from(*n).norm() > 0.1)
        .prop_map(|(o, d, n, offset)| {
            let ray = Ray { origin: Vec3::from(o), direction: Vec3::from(d).normalize() };
            let plane = Plane { id: 1, label: PlaneLabel::Ceiling, normal: Vec3::from(n).normalize(), offset };
            (ray, plane)
        })
}

/// The returned distance puts the ray point on the plane.
pub fn check_ray_plane(ray: &Ray, plane: &Plane) -> Result<(), TestCaseError> {
    if let Some(d) = ray_plane_distance(ray, plane) {
        let x = ray.at(d);
        let residual = plane.normal.dot(&x) + plane.offset;
        // Relative to the magnitudes involved in the dot product.
        let scale = 1.0 + x.norm() + plane.offset.abs();
        prop_assert!(residual.abs() <= 1e-9 * scale, "residual {residual} at d {d}");
    } else {
        prop_assert!(ray.direction.dot(&plane.normal).abs() < ecar::geometry::PARALLEL_EPS);
    }
    Ok(())
}

/// Quantization bounds: the point lies inside the cell it is assigned to.
pub fn check_cell_of(p: &Vec3, cellsize: f64) -> Result<(), TestCaseError> {
    let key = cell_of(p, cellsize);
    for axis in 0..3 {
        let lo = key.0[axis] as f64 * cellsize;
        let hi = (key.0[axis] + 1) as f64 * cellsize;
        // Division rounding can land exactly on a boundary.
        let slack = 1e-12 * (1.0 + p[axis].abs());
        prop_assert!(lo - slack <= p[axis] && p[axis] < hi + slack, "axis {axis}: {} not in [{lo}, {hi})", p[axis]);
    }
    Ok(())
}

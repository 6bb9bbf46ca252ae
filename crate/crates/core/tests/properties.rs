//! Property suites: codec, graph bookkeeping, device queue, geometry and
//! simulation determinism.

mod common;

use ecar::client::DeviceLocalGraph;
use ecar::geometry::cell_of;
use ecar::graph::{CellKey, VoPayload};
use ecar::protocol::{decode, encode, message_size, FrameUpload, FullPointData, LocalGraphDown};
use ecar::server::SyncMode;
use ecar::sim::runner::{run_scenario, RunConfig, Scenario};
use ecar::{Envelope, Message, Vec3, VirtualObject};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 10_000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn codec_round_trip_and_truncation(env in common::envelope()) {
        common::check_codec(&env)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    /// Counts up to the u16 field limit.
    #[test]
    fn codec_large_counts(n in 0usize..=65_535, kp in common::wire_keypoint()) {
        let msg = Message::FrameUpload(FrameUpload { frame_id: 1, timestamp_us: 2, quality: 50, keypoints: vec![kp; n] });
        let env = Envelope { device_id: 1, seq: 1, message: msg };
        let bytes = encode(&env).unwrap();
        prop_assert_eq!(bytes.len(), 41 + 45 * n);
        prop_assert_eq!(decode(&bytes).unwrap(), env);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn full_layout_adds_52_bytes_per_point(
        g in common::local_graph(64),
        d in common::descriptor(),
    ) {
        let lean = LocalGraphDown { points: g.points.iter().map(|p| ecar::protocol::GraphPoint { full: None, ..*p }).collect(), ..g };
        let extra = FullPointData { descriptor: d, normal: [0.0, 1.0, 0.0], dist_min: 0.5, dist_max: 9.0 };
        let full = LocalGraphDown {
            points: lean.points.iter().map(|p| ecar::protocol::GraphPoint { full: Some(extra), ..*p }).collect(),
            ..lean.clone()
        };
        let n = lean.points.len();
        let delta = message_size(&Message::LocalGraphDown(full)) - message_size(&Message::LocalGraphDown(lean));
        prop_assert_eq!(delta, 52 * n);
    }

    #[test]
    fn vo_single_residence(moves in common::vo_moves()) {
        common::check_single_residence(&moves)?;
    }

    #[test]
    fn ray_plane_substitution((ray, plane) in common::ray_and_plane()) {
        common::check_ray_plane(&ray, &plane)?;
    }

    #[test]
    fn cell_contains_its_point(p in prop::array::uniform3(-1e3f64..1e3), cellsize in 0.01f64..2.0) {
        common::check_cell_of(&Vec3::from(p), cellsize)?;
    }

    #[test]
    fn cell_translation_consistent(
        p in prop::array::uniform3(-100.0f64..100.0),
        step in prop::array::uniform3(-5i64..5),
    ) {
        // Power-of-two cell size keeps the translation exact in floating point.
        let c = 0.125;
        let x = Vec3::from(p);
        let moved = x + Vec3::new(step[0] as f64, step[1] as f64, step[2] as f64) * c;
        let k = cell_of(&x, c);
        prop_assert_eq!(cell_of(&moved, c), CellKey::new(k.0[0] + step[0], k.0[1] + step[1], k.0[2] + step[2]));
    }

    #[test]
    fn jacobian_matches_central_differences((pose, x) in common::camera_and_point()) {
        common::check_jacobian(&pose, &x)?;
    }

    /// Objects delivered in any order never show an older version than one
    /// already seen.
    #[test]
    fn device_vo_versions_never_regress(batches in prop::collection::vec(prop::collection::vec((1u64..5, 1u32..20), 0..6), 1..30)) {
        let mut g = DeviceLocalGraph::new(4);
        let mut best: std::collections::BTreeMap<u64, u32> = Default::default();
        for batch in batches {
            let vos = batch.iter().map(|&(id, version)| VirtualObject {
                id,
                position: Vec3::zeros(),
                version,
                owner_device: 0,
                payload: VoPayload::Opaque(Vec::new()),
            });
            g.update_vos(vos.collect());
            for (id, vo) in g.visible_vos() {
                prop_assert!(vo.version >= best.get(id).copied().unwrap_or(0));
            }
            for (&id, vo) in g.visible_vos() {
                best.insert(id, vo.version);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    /// Up to 50 keyframes over a 500-point pool.
    #[test]
    fn graph_refcounts_and_covis_match_recount(ops in common::graph_ops(500, 120), threshold in 1u32..20) {
        common::check_graph_ops(&ops, threshold, 50)?;
    }

    /// Small pool so keyframes overlap heavily and edges come and go.
    #[test]
    fn graph_dense_overlap(ops in common::graph_ops(45, 80), threshold in 1u32..20) {
        common::check_graph_ops(&ops, threshold, 50)?;
    }

    #[test]
    fn device_queue_matches_replay(replies in common::replies(50), queue_len in 1usize..10) {
        common::check_queue_replay(&replies, queue_len)?;
    }
}

#[test]
fn identical_seeds_give_identical_csv() {
    let run = |seed| {
        let cfg = RunConfig { frames: 120, ..RunConfig::new(SyncMode::Ecar, 3, Scenario::Drawing, seed) };
        let out = run_scenario(&cfg).unwrap();
        (out.frames_csv(), out.events_csv(), serde_json::to_string(&out.report).unwrap())
    };
    let a = run(11);
    assert_eq!(a, run(11));
    assert_ne!(a.0, run(12).0);
}

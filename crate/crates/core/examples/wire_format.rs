//! Byte layout of the four messages and the per-point saving of the
//! descriptor-free local graph.

use ecar::features::Descriptor;
use ecar::graph::{PlaneLabel, VirtualLine};
use ecar::protocol::{
    decode, encode, message_size, FrameUpload, FullPointData, GraphPoint, InteractionMessage, LocalGraphDown,
    WireKeypoint, WirePlane, WirePose, HEADER_LEN,
};
use ecar::{Envelope, Message, Pose, Vec3};

fn point(id: u64, full: bool) -> GraphPoint {
    GraphPoint {
        id,
        position: [0.1 * id as f32, 0.0, 3.0],
        obs_u: 100.0 + id as f32,
        obs_v: 200.0,
        angle: 0.0,
        octave: 1,
        full: full.then(|| FullPointData {
            descriptor: Descriptor([id as u8; 32]),
            normal: [0.0, 1.0, 0.0],
            dist_min: 0.4,
            dist_max: 6.0,
        }),
    }
}

fn graph(n: u64, full: bool) -> Message {
    Message::LocalGraphDown(LocalGraphDown {
        pose: WirePose::from(&Pose::identity()),
        points: (0..n).map(|i| point(i, full)).collect(),
        planes: vec![WirePlane { id: 1, label: PlaneLabel::Floor, normal: [0.0, 1.0, 0.0], offset: 0.05 }],
        vos: vec![],
    })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let kp = WireKeypoint { u: 10.0, v: 20.0, angle: 0.0, octave: 0, descriptor: Descriptor([0xAA; 32]) };
    let upload = Message::FrameUpload(FrameUpload { frame_id: 1, timestamp_us: 0, quality: 90, keypoints: vec![kp; 500] });
    let line = VirtualLine {
        start: Vec3::new(0.0, 0.0, 2.0),
        end: Vec3::new(0.3, 0.0, 2.0),
        rgb: [0, 120, 255],
        width: 0.01,
        normal: Vec3::y(),
    };
    let interaction = Message::Interaction(InteractionMessage::registration(&Vec3::new(0.15, 0.0, 2.0), line.to_bytes()));

    println!("header: {HEADER_LEN} B");
    for (name, msg) in [
        ("FrameUpload, 500 keypoints", upload),
        ("LocalGraphDown eCAR, 150 points", graph(150, false)),
        ("LocalGraphDown full, 150 points", graph(150, true)),
        ("Interaction with a line", interaction),
        ("Ack", Message::Ack),
    ] {
        let env = Envelope { device_id: 2, seq: 5, message: msg };
        let bytes = encode(&env)?;
        assert_eq!(decode(&bytes)?, env);
        println!("{name}: {} B (predicted {})", bytes.len(), message_size(&env.message));
    }
    let delta = message_size(&graph(1, true)) - message_size(&graph(1, false));
    println!("full layout costs {delta} B more per point");

    let bytes = encode(&Envelope { device_id: 2, seq: 6, message: graph(3, false) })?;
    println!("truncated by one byte: {}", decode(&bytes[..bytes.len() - 1]).unwrap_err());
    Ok(())
}

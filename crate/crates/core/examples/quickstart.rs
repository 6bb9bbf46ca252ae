//! Smallest end-to-end loop: one device walks a few meters of corridor,
//! syncs with an in-process server every fourth frame, registers an object
//! on the floor and sees it come back in the next local graph.

use std::sync::Arc;

use ecar::client::TouchResult;
use ecar::protocol::encode;
use ecar::sim::trajectory::Trajectory;
use ecar::sim::{stream_rng, synthesize_frame, Scene, SynthConfig};
use ecar::{ClientConfig, DeviceClient, EdgeServer, ServerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = Arc::new(Scene::corridor(0));
    let server = EdgeServer::new(ServerConfig::default())?.with_oracle(scene.clone());
    let path = Trajectory::corridor(60, 0.0, 1.0, 4.0);
    server.register_device(1, Some(path.poses[0]));

    let mut dev = DeviceClient::new(1, ClientConfig::default())?;
    let synth = SynthConfig::default();
    let mut rng = stream_rng(0, 1);
    let mut vo = None;
    for (i, pose) in path.poses.iter().enumerate() {
        let kps = synthesize_frame(&scene, pose, &synth, 100, &mut rng);
        dev.track_frame(&kps);
        if !dev.is_sync_frame(i as u64) {
            continue;
        }
        let up = dev.make_upload(i as u64, i as u64 * 33_333, &kps);
        let reply = server.handle_message(&encode(&up)?)?;
        dev.apply_message(&reply)?;
        if i == 20 {
            if let TouchResult::Interaction(msg) = dev.make_interaction((320.0, 400.0), None, Vec::new()) {
                let out = server.handle_interaction(1, &msg)?;
                println!("frame {i}: registered object {} at {:?}", out.vo_id, msg.position);
                vo = Some(out.vo_id);
            }
        }
        let g = dev.local_graph();
        println!(
            "frame {i:2}: {} B down, {} points, {} planes, {} objects",
            reply.len(),
            g.map_points().len(),
            g.planes().len(),
            g.visible_vos().len()
        );
    }
    let pose = dev.pose().expect("tracking");
    for (id, px) in dev.render_state(&pose) {
        println!("object {id} on screen at {px:?} (registered {vo:?})");
    }
    Ok(())
}

//! Starts the HTTP server on a loopback port, syncs a device over real
//! sockets and reads the spectator state back.

use std::future::IntoFuture;
use std::sync::Arc;

use ecar::protocol::encode;
use ecar::sim::trajectory::Trajectory;
use ecar::sim::{stream_rng, synthesize_frame, Scene, SynthConfig};
use ecar::{ClientConfig, DeviceClient, EdgeServer, ServerConfig};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

/// Minimal HTTP/1.1 exchange; returns the response body.
async fn request(addr: std::net::SocketAddr, head: &str, body: &[u8]) -> std::io::Result<Vec<u8>> {
    let mut s = TcpStream::connect(addr).await?;
    let msg = format!("{head}\r\nHost: {addr}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
    s.write_all(msg.as_bytes()).await?;
    s.write_all(body).await?;
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).await?;
    let split = buf.windows(4).position(|w| w == b"\r\n\r\n").map_or(buf.len(), |i| i + 4);
    Ok(buf.split_off(split))
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scene = Arc::new(Scene::corridor(0));
    let server = Arc::new(EdgeServer::new(ServerConfig::default())?.with_oracle(scene.clone()));
    let path = Trajectory::corridor(16, 0.0, 1.0, 2.0);
    server.register_device(1, Some(path.poses[0]));

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(axum::serve(listener, ecar::http::router(server, None)).into_future());
    println!("serving on http://{addr}");

    let mut dev = DeviceClient::new(1, ClientConfig::default())?;
    let mut rng = stream_rng(0, 1);
    for (i, pose) in path.poses.iter().enumerate().step_by(4) {
        let kps = synthesize_frame(&scene, pose, &SynthConfig::default(), 100, &mut rng);
        let up = dev.make_upload(i as u64, 0, &kps);
        let reply = request(addr, "POST /frame HTTP/1.1", &encode(&up)?).await?;
        dev.apply_message(&reply)?;
        println!("frame {i}: {} B reply, {} local points", reply.len(), dev.local_graph().map_points().len());
    }
    let reg = br#"{"device_id": 1, "op": "registration", "position": [0.0, -0.05, 4.0]}"#;
    let head = "POST /interact HTTP/1.1\r\nContent-Type: application/json";
    println!("interact: {}", String::from_utf8_lossy(&request(addr, head, reg).await?));
    println!("state: {}", String::from_utf8_lossy(&request(addr, "GET /state HTTP/1.1", b"").await?));
    Ok(())
}

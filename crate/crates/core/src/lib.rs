//! Edge-assisted collaborative AR state synchronization.
//!
//! An edge server keeps a single graph-grid map (map points, keyframes,
//! structure planes, grid cells and virtual objects). Devices upload feature
//! frames every few frames; the server aligns them into its coordinate system
//! and answers with a compact local graph: tracked map points without
//! descriptors, the planes around the device and the virtual objects whose
//! grid cells are in view.
//!
//! Module map:
//!
//! - [`graph`]: the shared graph-grid data structure.
//! - [`geometry`]: projection, ray/plane reconstruction, grid quantization,
//!   RANSAC plane fitting and Gauss-Newton pose refinement.
//! - [`features`]: binary descriptors and projection-guided matching.
//! - [`protocol`]: the byte-exact wire format.
//! - [`server`]: the edge server.
//! - [`client`]: the device side (tracking, keyframe queue, touch input).
//! - [`sim`]: scenes, trajectories, the shared-channel emulator and the
//!   experiment runners.
//! - [`http`]: REST endpoints over the server.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example quickstart`
//! is the shortest tour.

pub mod client;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod http;
pub mod protocol;
pub mod server;
pub mod sim;

pub use client::{ClientConfig, DeviceClient, DeviceLocalGraph};
pub use geometry::{CameraIntrinsics, Pose, Ray};
pub use graph::{CellKey, GlobalGraph, MapPoint, Plane, PlaneLabel, VirtualLine, VirtualObject};
pub use protocol::{Envelope, Message};
pub use server::{EdgeServer, ServerConfig, SyncMode};

/// 3-vector in scene units (meters in simulation).
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix.
pub type Mat3 = nalgebra::Matrix3<f64>;

pub type MapPointId = u64;
pub type KeyFrameId = u64;
pub type PlaneId = u32;
pub type VoId = u64;
pub type DeviceId = u32;

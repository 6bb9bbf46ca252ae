//! Ground-truth camera paths sampled at a fixed frame rate.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::sim::scene::FLOOR_Y;
use crate::Vec3;

pub const FPS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Corridor,
    HalfCircle,
    Static,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub poses: Vec<Pose>,
}

impl Trajectory {
    /// Straight walk along +z at eye height, gaze slightly lowered, with a
    /// gentle lateral sway. `lane` shifts the route sideways.
    pub fn corridor(frames: usize, lane: f64, z_start: f64, z_end: f64) -> Self {
        let n = frames.max(2);
        let poses = (0..frames)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                let z = z_start + (z_end - z_start) * s;
                let sway = 0.05 * (z * 0.8).sin();
                let eye = Vec3::new(lane + sway, 1.5, z);
                let target = Vec3::new(lane, 0.9, z + 4.0);
                Pose::look_at(eye, target, Vec3::y())
            })
            .collect();
        Self { kind: TrajectoryKind::Corridor, poses }
    }

    /// Arc of `degrees` around `center` on the floor at `radius` and eye
    /// `height`, always looking at the center. Angle 0 is on the -z side.
    pub fn half_circle(frames: usize, center: Vec3, radius: f64, height: f64, degrees: f64) -> Self {
        let n = frames.max(2);
        let poses = (0..frames)
            .map(|i| {
                let a = (degrees * i as f64 / (n - 1) as f64).to_radians();
                Self::orbit_pose(center, radius, height, a)
            })
            .collect();
        Self { kind: TrajectoryKind::HalfCircle, poses }
    }

    /// Pose on the orbit at angle `a` (radians).
    pub fn orbit_pose(center: Vec3, radius: f64, height: f64, a: f64) -> Pose {
        let eye = Vec3::new(center.x + radius * a.sin(), FLOOR_Y + height, center.z - radius * a.cos());
        Pose::look_at(eye, center, Vec3::y())
    }

    /// Hand-held camera: millimeter-scale smooth jitter around a fixed view.
    pub fn static_view(frames: usize, eye: Vec3, target: Vec3) -> Self {
        let poses = (0..frames)
            .map(|i| {
                let t = i as f64 / 30.0;
                let wobble = Vec3::new((1.3 * t).sin(), (0.7 * t + 1.0).sin(), (0.9 * t + 2.0).sin()) * 0.005;
                Pose::look_at(eye + wobble, target + wobble * 2.0, Vec3::y())
            })
            .collect();
        Self { kind: TrajectoryKind::Static, poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

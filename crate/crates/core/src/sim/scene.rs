//! Synthetic scenes: labeled rectangles sprinkled with textured landmarks.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{Descriptor, Keypoint, KeypointIndex};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::graph::{Plane, PlaneLabel};
use crate::server::{Landmark, LandmarkOracle};
use crate::{PlaneId, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Corridor,
    HalfCircle,
    Static,
}

/// Rectangle `origin + a * u + b * v` for `a, b` in `[0, 1]`, with the plane
/// normal facing the room interior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePlane {
    pub plane: Plane,
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    /// Landmarks per square unit.
    pub density: f64,
}

impl ScenePlane {
    fn new(id: PlaneId, label: PlaneLabel, origin: Vec3, u: Vec3, v: Vec3, inward: Vec3, density: f64) -> Self {
        let mut normal = u.cross(&v).normalize();
        if normal.dot(&inward) < 0.0 {
            normal = -normal;
        }
        let plane = Plane { id, label, normal, offset: -normal.dot(&origin) };
        Self { plane, origin, u, v, density }
    }

    pub fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneLandmark {
    pub position: Vec3,
    pub descriptor: Descriptor,
    pub label: PlaneLabel,
    /// Index into [`Scene::planes`].
    pub plane: usize,
}

/// A projected landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sighting {
    pub landmark: usize,
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub kind: SceneKind,
    pub planes: Vec<ScenePlane>,
    pub landmarks: Vec<SceneLandmark>,
    pub seed: u64,
    /// Landmarks farther than this (camera depth) are not detected.
    pub max_depth: f64,
}

/// Corridor half-width; walls sit mid-cell for the default 0.1 cell size.
pub const CORRIDOR_HALF_WIDTH: f64 = 1.55;
pub const CORRIDOR_LENGTH: f64 = 30.0;
pub const CORRIDOR_HEIGHT: f64 = 2.5;
/// Floor height. Surfaces are offset half a cell from grid boundaries so
/// that reconstructed points do not flap between cells.
pub const FLOOR_Y: f64 = -0.05;

impl Scene {
    fn build(kind: SceneKind, planes: Vec<ScenePlane>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut landmarks = Vec::new();
        for (i, sp) in planes.iter().enumerate() {
            let n = (sp.area() * sp.density).round() as usize;
            for _ in 0..n {
                let (a, b): (f64, f64) = (rng.gen(), rng.gen());
                let mut d = [0u8; 32];
                rng.fill(&mut d);
                landmarks.push(SceneLandmark {
                    position: sp.origin + sp.u * a + sp.v * b,
                    descriptor: Descriptor(d),
                    label: sp.plane.label,
                    plane: i,
                });
            }
        }
        Self { kind, planes, landmarks, seed, max_depth: 20.0 }
    }

    /// 30 m corridor along +z: floor, two side walls and two end walls.
    pub fn corridor(seed: u64) -> Self {
        let (w, l, h, y0) = (CORRIDOR_HALF_WIDTH, CORRIDOR_LENGTH, CORRIDOR_HEIGHT, FLOOR_Y);
        let (z0, z1) = (-0.05, l + 0.05);
        let len = z1 - z0;
        let inside = Vec3::new(0.0, 1.0, l / 2.0);
        let mk = |id, label, origin: Vec3, u, v, density| {
            ScenePlane::new(id, label, origin, u, v, inside - origin, density)
        };
        let planes = vec![
            mk(1, PlaneLabel::Floor, Vec3::new(-w, y0, z0), Vec3::new(2.0 * w, 0.0, 0.0), Vec3::new(0.0, 0.0, len), 2.5),
            mk(2, PlaneLabel::Wall, Vec3::new(-w, y0, z0), Vec3::new(0.0, h, 0.0), Vec3::new(0.0, 0.0, len), 2.5),
            mk(3, PlaneLabel::Wall, Vec3::new(w, y0, z0), Vec3::new(0.0, h, 0.0), Vec3::new(0.0, 0.0, len), 2.5),
            mk(4, PlaneLabel::Wall, Vec3::new(-w, y0, z0), Vec3::new(2.0 * w, 0.0, 0.0), Vec3::new(0.0, h, 0.0), 10.0),
            mk(5, PlaneLabel::Wall, Vec3::new(-w, y0, z1), Vec3::new(2.0 * w, 0.0, 0.0), Vec3::new(0.0, h, 0.0), 10.0),
        ];
        Self::build(SceneKind::Corridor, planes, seed)
    }

    /// 10 m x 10 m room centered on the origin with a densely textured floor.
    pub fn half_circle_room(seed: u64) -> Self {
        Self::room(SceneKind::HalfCircle, 5.05, 3.0, 20.0, 2.0, seed)
    }

    /// 4 m x 4 m room with evenly textured floor and walls.
    pub fn static_room(seed: u64) -> Self {
        Self::room(SceneKind::Static, 2.05, 2.5, 15.0, 15.0, seed)
    }

    fn room(kind: SceneKind, half: f64, h: f64, floor_density: f64, wall_density: f64, seed: u64) -> Self {
        let y0 = FLOOR_Y;
        let inside = Vec3::new(0.0, 1.0, 0.0);
        let mk = |id, label, origin: Vec3, u, v, density| {
            ScenePlane::new(id, label, origin, u, v, inside - origin, density)
        };
        let span = 2.0 * half;
        let planes = vec![
            mk(1, PlaneLabel::Floor, Vec3::new(-half, y0, -half), Vec3::new(span, 0.0, 0.0), Vec3::new(0.0, 0.0, span), floor_density),
            mk(2, PlaneLabel::Wall, Vec3::new(-half, y0, -half), Vec3::new(0.0, h, 0.0), Vec3::new(0.0, 0.0, span), wall_density),
            mk(3, PlaneLabel::Wall, Vec3::new(half, y0, -half), Vec3::new(0.0, h, 0.0), Vec3::new(0.0, 0.0, span), wall_density),
            mk(4, PlaneLabel::Wall, Vec3::new(-half, y0, -half), Vec3::new(span, 0.0, 0.0), Vec3::new(0.0, h, 0.0), wall_density),
            mk(5, PlaneLabel::Wall, Vec3::new(-half, y0, half), Vec3::new(span, 0.0, 0.0), Vec3::new(0.0, h, 0.0), wall_density),
        ];
        Self::build(kind, planes, seed)
    }

    pub fn ground_truth_planes(&self) -> Vec<Plane> {
        self.planes.iter().map(|p| p.plane).collect()
    }

    /// Landmarks in front of the camera, inside the image, within
    /// `max_depth` and on a surface facing the camera. Sorted nearest first,
    /// ties by landmark index.
    pub fn visible(&self, k: &CameraIntrinsics, pose: &Pose) -> Vec<Sighting> {
        let center = pose.center();
        let mut out: Vec<Sighting> = self
            .landmarks
            .iter()
            .enumerate()
            .filter_map(|(i, lm)| {
                let pc = pose.transform(&lm.position);
                if pc.z <= 0.05 || pc.z > self.max_depth {
                    return None;
                }
                if self.planes[lm.plane].plane.normal.dot(&(center - lm.position)) <= 0.0 {
                    return None;
                }
                let px = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
                k.contains(px.x, px.y).then_some(Sighting { landmark: i, pixel: px, depth: pc.z })
            })
            .collect();
        out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.landmark.cmp(&b.landmark)));
        out
    }
}

impl LandmarkOracle for Scene {
    /// Each selected keypoint is paired with the visible landmark projecting
    /// within 3 px whose descriptor is closest (at most 64 bits apart).
    fn identify(&self, k: &CameraIntrinsics, pose: &Pose, keypoints: &[Keypoint], which: &[usize]) -> Vec<Option<Landmark>> {
        let seen = self.visible(k, pose);
        let projected: Vec<Keypoint> = seen
            .iter()
            .map(|s| Keypoint {
                u: s.pixel.x,
                v: s.pixel.y,
                angle: 0.0,
                octave: 0,
                descriptor: self.landmarks[s.landmark].descriptor,
            })
            .collect();
        let index = KeypointIndex::new(&projected, 8.0);
        which
            .iter()
            .map(|&i| {
                let kp = &keypoints[i];
                index
                    .within(kp.u, kp.v, 3.0)
                    .into_iter()
                    .map(|j| (kp.descriptor.hamming(&projected[j].descriptor), j))
                    .filter(|&(d, _)| d <= 64)
                    .min()
                    .map(|(_, j)| {
                        let lm = &self.landmarks[seen[j].landmark];
                        Landmark { position: lm.position, label: lm.label }
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmarks_lie_on_their_planes() {
        for scene in [Scene::corridor(1), Scene::half_circle_room(2), Scene::static_room(3)] {
            for lm in &scene.landmarks {
                let r = scene.planes[lm.plane].plane.signed_distance(&lm.position);
                assert!(r.abs() < 1e-9, "{r}");
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let (a, b) = (Scene::corridor(9), Scene::corridor(9));
        assert_eq!(a.landmarks, b.landmarks);
        assert_ne!(a.landmarks, Scene::corridor(10).landmarks);
    }

    #[test]
    fn normals_face_inside() {
        let scene = Scene::corridor(1);
        let inside = Vec3::new(0.0, 1.0, 15.0);
        for p in &scene.planes {
            assert!(p.plane.signed_distance(&inside) > 0.0);
        }
    }

    #[test]
    fn facing_away_sees_nothing() {
        let scene = Scene::corridor(1);
        // Standing behind the origin end wall, looking away from the corridor.
        let pose = Pose::look_at(Vec3::new(0.0, 1.5, -1.0), Vec3::new(0.0, 1.5, -5.0), Vec3::y());
        assert!(scene.visible(&CameraIntrinsics::vga(), &pose).is_empty());
    }
}

//! Camera model, back-projection and plane reconstruction, grid quantization.
//!
//! Conventions: a [`Pose`] maps world to camera, `X_c = R * X_w + t`. The
//! camera looks down its +Z axis with +X right and +Y down in the image. World
//! up is +Y.

mod pose_solver;
mod ransac;

pub use pose_solver::{reprojection_jacobian, solve_pose_gn, GnParams, PoseError, PoseSolution};
pub use ransac::{fit_plane_ransac, RansacParams};

use std::collections::BTreeSet;

use nalgebra::{Rotation3, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{CellKey, Plane};
use crate::{Mat3, PlaneId, Vec3};

/// Depth below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;
/// `|l . n|` below which a ray is treated as parallel to a plane.
pub const PARALLEL_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("rotation is not orthonormal with det +1")]
    NotARotation,
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal lengths must be positive"));
        }
        if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
            return Err(GeometryError::InvalidIntrinsics("principal point outside the image"));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// 640x480, f = 500 px, centered principal point.
    pub fn vga() -> Self {
        Self { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// `K^-1 (u, v, 1)^T`.
    pub fn unproject(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::vga()
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        if pose.is_valid(1e-6) {
            Ok(pose)
        } else {
            Err(GeometryError::NotARotation)
        }
    }

    /// Pose of a camera at `center` with world-to-camera rotation `rotation`.
    pub fn from_center(rotation: Mat3, center: Vec3) -> Self {
        Self { rotation, translation: -(rotation * center) }
    }

    /// Camera at `eye` looking at `target`, image up aligned with `up` as far
    /// as possible.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = (target - eye).normalize();
        let mut down = -up + forward * up.dot(&forward);
        if down.norm() < 1e-9 {
            // Looking straight along `up`; pick any perpendicular.
            let alt = if forward.x.abs() < 0.9 { Vec3::x() } else { Vec3::z() };
            down = alt - forward * alt.dot(&forward);
        }
        let down = down.normalize();
        let right = down.cross(&forward);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::from_center(rotation, eye)
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self * other` (apply `other` first).
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Left-multiplicative tangent update `exp([omega, dt]) * self`.
    pub fn perturbed(&self, omega: &Vec3, dt: &Vec3) -> Self {
        let step = Rotation3::new(*omega).into_inner();
        Self { rotation: step * self.rotation, translation: step * self.translation + dt }
    }

    /// Geodesic angle between the two rotations, radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Mat3::identity()).abs().max() <= tol;
        let det = (r.determinant() - 1.0).abs() <= tol;
        ortho && det && self.translation.iter().all(|v| v.is_finite())
    }

    /// Re-orthonormalizes the rotation (SVD projection).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * vt;
        }
        Self { rotation: r, translation: self.translation }
    }
}

/// Back-projection ray in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction * s
    }
}

/// Projects a world point to pixels. `None` when the point is at or behind
/// the camera plane.
pub fn project(k: &CameraIntrinsics, pose: &Pose, world: &Vec3) -> Option<Vector2<f64>> {
    let pc = pose.transform(world);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    Some(Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy))
}

/// Ray through pixel `(u, v)`: origin at the camera center, direction
/// `normalize(R^T K^-1 (u, v, 1))`.
pub fn back_project_ray(k: &CameraIntrinsics, pose: &Pose, u: f64, v: f64) -> Ray {
    let dir = pose.rotation.transpose() * k.unproject(u, v);
    Ray { origin: pose.center(), direction: dir.normalize() }
}

/// Signed distance along the ray to the plane, `None` if parallel.
pub fn ray_plane_distance(ray: &Ray, plane: &Plane) -> Option<f64> {
    let denom = ray.direction.dot(&plane.normal);
    if denom.abs() < PARALLEL_EPS {
        return None;
    }
    Some(-(plane.offset + ray.origin.dot(&plane.normal)) / denom)
}

/// Nearest plane hit in front of the camera closer than `th_dist`.
pub fn reconstruct_point(ray: &Ray, planes: &[Plane], th_dist: f64) -> Option<(Vec3, PlaneId)> {
    let mut best: Option<(f64, PlaneId)> = None;
    for plane in planes {
        let Some(d) = ray_plane_distance(ray, plane) else { continue };
        if d > 0.0 && d < th_dist {
            let better = match best {
                None => true,
                Some((bd, bid)) => d < bd || (d == bd && plane.id < bid),
            };
            if better {
                best = Some((d, plane.id));
            }
        }
    }
    best.map(|(d, id)| (ray.at(d), id))
}

/// Grid cell containing `x`; floor quantization toward negative infinity.
pub fn cell_of(x: &Vec3, cellsize: f64) -> CellKey {
    debug_assert!(cellsize > 0.0);
    CellKey::new(
        (x.x / cellsize).floor() as i64,
        (x.y / cellsize).floor() as i64,
        (x.z / cellsize).floor() as i64,
    )
}

/// Sampling lattice centers `window/2, 3*window/2, ...` along one axis.
pub(crate) fn lattice(extent: u32, window: u32) -> impl Iterator<Item = f64> {
    let w = window.max(1) as f64;
    let n = (extent as f64 / w).ceil() as usize;
    (0..n).map(move |i| w * 0.5 + i as f64 * w).filter(move |&c| c < extent as f64)
}

/// Every surface sample hit from the pixel lattice, with the plane it lies on.
pub fn sample_surfaces(
    k: &CameraIntrinsics,
    pose: &Pose,
    planes: &[Plane],
    window: u32,
    th_dist: f64,
) -> Vec<(Vec3, PlaneId)> {
    let mut hits = Vec::new();
    if planes.is_empty() {
        return hits;
    }
    let rt = pose.rotation.transpose();
    let origin = pose.center();
    let us: Vec<f64> = lattice(k.width, window).collect();
    for v in lattice(k.height, window) {
        for &u in &us {
            let ray = Ray { origin, direction: (rt * k.unproject(u, v)).normalize() };
            if let Some(hit) = reconstruct_point(&ray, planes, th_dist) {
                hits.push(hit);
            }
        }
    }
    hits
}

/// Grid cells seen from `pose` through the given planes.
pub fn viewing_cells(
    k: &CameraIntrinsics,
    pose: &Pose,
    planes: &[Plane],
    window: u32,
    th_dist: f64,
    cellsize: f64,
) -> BTreeSet<CellKey> {
    sample_surfaces(k, pose, planes, window, th_dist)
        .iter()
        .map(|(x, _)| cell_of(x, cellsize))
        .collect()
}

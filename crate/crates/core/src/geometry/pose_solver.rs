//! Robust Gauss-Newton refinement of a camera pose from 2D-3D matches.

use nalgebra::{Matrix6, SMatrix, SymmetricEigen, Vector2, Vector6};
use thiserror::Error;

use super::{CameraIntrinsics, Pose, MIN_DEPTH};
use crate::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum PoseError {
    #[error("need at least 6 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("normal equations are singular")]
    SingularNormalEquations,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GnParams {
    pub iters: usize,
    /// Huber threshold on the reprojection error norm, pixels.
    pub huber_px: f64,
}

impl Default for GnParams {
    fn default() -> Self {
        // sqrt of the 95% chi-square quantile for 2 DoF.
        Self { iters: 10, huber_px: 5.991f64.sqrt() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSolution {
    pub pose: Pose,
    /// Correspondences with final reprojection error at most 2 px.
    pub inliers: usize,
    pub cost: f64,
}

const INLIER_PX: f64 = 2.0;
const MIN_CORRESPONDENCES: usize = 6;
const STEP_TOL: f64 = 1e-8;
const DAMPING: f64 = 1e-6;
const RCOND_MIN: f64 = 1e-12;

/// Jacobian of the pixel projection with respect to a left-multiplicative
/// tangent update `[omega, dt]`. `None` for points behind the camera.
pub fn reprojection_jacobian(k: &CameraIntrinsics, pose: &Pose, world: &Vec3) -> Option<SMatrix<f64, 2, 6>> {
    let pc = pose.transform(world);
    if pc.z <= MIN_DEPTH {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    // d(pixel)/d(X_c)
    let jp = SMatrix::<f64, 2, 3>::new(k.fx * iz, 0.0, -k.fx * x * iz2, 0.0, k.fy * iz, -k.fy * y * iz2);
    // d(X_c)/d(omega) = -[X_c]x, d(X_c)/d(dt) = I
    let skew = nalgebra::Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jp * -skew));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&jp);
    Some(j)
}

fn residual(k: &CameraIntrinsics, pose: &Pose, world: &Vec3, obs: &Vector2<f64>) -> Option<Vector2<f64>> {
    super::project(k, pose, world).map(|p| p - obs)
}

fn huber(norm: f64, delta: f64) -> f64 {
    if norm <= delta {
        0.5 * norm * norm
    } else {
        delta * (norm - 0.5 * delta)
    }
}

fn robust_cost(k: &CameraIntrinsics, pose: &Pose, corr: &[(Vec3, Vector2<f64>)], delta: f64) -> f64 {
    corr.iter()
        .map(|(x, obs)| match residual(k, pose, x, obs) {
            Some(r) => huber(r.norm(), delta),
            // Points behind the camera cost as a large, fixed outlier.
            None => huber(1e4, delta),
        })
        .sum()
}

/// Refines `initial` by iteratively reweighted Gauss-Newton under a Huber
/// loss. Steps that would raise the robust cost are halved (up to 10 times);
/// if none helps, the current pose is kept and iteration stops.
pub fn solve_pose_gn(
    k: &CameraIntrinsics,
    correspondences: &[(Vec3, Vector2<f64>)],
    initial: &Pose,
    params: &GnParams,
) -> Result<PoseSolution, PoseError> {
    if correspondences.len() < MIN_CORRESPONDENCES {
        return Err(PoseError::InsufficientCorrespondences(correspondences.len()));
    }
    let delta = params.huber_px;
    let mut pose = *initial;
    let mut cost = robust_cost(k, &pose, correspondences, delta);

    for _ in 0..params.iters {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (x, obs) in correspondences {
            let (Some(j), Some(r)) = (reprojection_jacobian(k, &pose, x), residual(k, &pose, x, obs)) else {
                continue;
            };
            let n = r.norm();
            let w = if n <= delta { 1.0 } else { delta / n };
            h += w * j.transpose() * j;
            g += w * j.transpose() * r;
        }
        let eig = SymmetricEigen::new(h);
        let max_eig = eig.eigenvalues.max();
        let min_eig = eig.eigenvalues.min();
        if !(max_eig > 0.0) || min_eig <= RCOND_MIN * max_eig {
            return Err(PoseError::SingularNormalEquations);
        }
        let damped = h + Matrix6::identity() * (DAMPING * h.trace());
        let step = damped
            .cholesky()
            .ok_or(PoseError::SingularNormalEquations)?
            .solve(&(-g));

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..10 {
            let s = step * scale;
            let omega = Vec3::new(s[0], s[1], s[2]);
            let dt = Vec3::new(s[3], s[4], s[5]);
            let candidate = pose.perturbed(&omega, &dt);
            let c = robust_cost(k, &candidate, correspondences, delta);
            if c <= cost {
                accepted = Some((candidate, c, s.norm()));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, c, norm)) = accepted else { break };
        pose = candidate;
        cost = c;
        if norm < STEP_TOL {
            break;
        }
    }

    let pose = pose.orthonormalized();
    let inliers = correspondences
        .iter()
        .filter(|(x, obs)| residual(k, &pose, x, obs).map_or(false, |r| r.norm() <= INLIER_PX))
        .count();
    Ok(PoseSolution { pose, inliers, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn scene(rng: &mut impl Rng, n: usize, pose: &Pose, k: &CameraIntrinsics, noise: f64) -> Vec<(Vec3, Vector2<f64>)> {
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut out = Vec::new();
        while out.len() < n {
            let u = rng.gen_range(20.0..620.0);
            let v = rng.gen_range(20.0..460.0);
            let depth = rng.gen_range(1.0..3.0);
            let pc = k.unproject(u, v) * depth;
            let pw = pose.rotation.transpose() * (pc - pose.translation);
            let px = project(k, pose, &pw).unwrap();
            let obs = if noise > 0.0 {
                px + Vector2::new(normal.sample(rng), normal.sample(rng))
            } else {
                px
            };
            out.push((pw, obs));
        }
        out
    }

    fn true_pose() -> Pose {
        Pose::look_at(Vec3::new(0.3, 1.4, -0.5), Vec3::new(0.0, 0.2, 2.0), Vec3::y())
    }

    #[test]
    fn noise_free_recovery() {
        let k = CameraIntrinsics::vga();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let truth = true_pose();
        let corr = scene(&mut rng, 20, &truth, &k, 0.0);
        let axis = Vec3::new(0.3, -0.8, 0.5).normalize();
        let init = truth.perturbed(&(axis * 5f64.to_radians()), &Vec3::new(0.1, 0.0, 0.0));
        let sol = solve_pose_gn(&k, &corr, &init, &GnParams { iters: 20, ..Default::default() }).unwrap();
        assert!(sol.pose.rotation_angle_to(&truth) < 1e-6);
        assert!((sol.pose.translation - truth.translation).norm() < 1e-6);
        assert_eq!(sol.inliers, 20);
    }

    #[test]
    fn too_few_points() {
        let k = CameraIntrinsics::vga();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corr = scene(&mut rng, 5, &true_pose(), &k, 0.0);
        assert_eq!(
            solve_pose_gn(&k, &corr, &true_pose(), &GnParams::default()),
            Err(PoseError::InsufficientCorrespondences(5))
        );
    }

    #[test]
    fn collinear_through_center_is_singular() {
        // Every point sits on one line through the camera center, so all of
        // them image to the same pixel.
        let k = CameraIntrinsics::vga();
        let pose = Pose::identity();
        let dir = Vec3::new(0.1, -0.05, 1.0).normalize();
        let corr: Vec<_> = (1..=10)
            .map(|i| {
                let x = dir * i as f64;
                (x, project(&k, &pose, &x).unwrap())
            })
            .collect();
        assert_eq!(
            solve_pose_gn(&k, &corr, &pose, &GnParams::default()),
            Err(PoseError::SingularNormalEquations)
        );
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let k = CameraIntrinsics::vga();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let pose = Pose {
                rotation: Rotation3::new(axis * 0.7).into_inner(),
                translation: Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(2.0..4.0)),
            };
            let pc = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(1.0..5.0));
            let pw = pose.rotation.transpose() * (pc - pose.translation);
            let j = reprojection_jacobian(&k, &pose, &pw).unwrap();
            let mut fd = SMatrix::<f64, 2, 6>::zeros();
            for c in 0..6 {
                let mut e = Vector6::<f64>::zeros();
                e[c] = h;
                let step = |s: f64| {
                    let v = e * s;
                    let p = pose.perturbed(&Vec3::new(v[0], v[1], v[2]), &Vec3::new(v[3], v[4], v[5]));
                    project(&k, &p, &pw).unwrap()
                };
                let d = (step(1.0) - step(-1.0)) / (2.0 * h);
                fd.set_column(c, &d);
            }
            let rel = (j - fd).norm() / j.norm();
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn cost_never_increases_and_noise_bound() {
        let k = CameraIntrinsics::vga();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut errors = Vec::new();
        for trial in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let truth = true_pose();
            let mut corr = scene(&mut rng, 100, &truth, &k, 0.0);
            for (_, obs) in corr.iter_mut() {
                *obs += Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
            let init = truth.perturbed(&Vec3::new(0.02, -0.01, 0.015), &Vec3::new(0.03, -0.02, 0.02));
            let start = robust_cost(&k, &init, &corr, GnParams::default().huber_px);
            let sol = solve_pose_gn(&k, &corr, &init, &GnParams::default()).unwrap();
            assert!(sol.cost <= start);
            errors.push((sol.pose.center() - truth.center()).norm());
        }
        errors.sort_by(f64::total_cmp);
        let p95 = errors[94];
        assert!(p95 < 0.01, "95th percentile translation error {p95}");
    }
}

use nalgebra::SymmetricEigen;
use rand::Rng;

use crate::graph::{Plane, PlaneLabel};
use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RansacParams {
    pub iters: usize,
    pub inlier_dist: f64,
    pub min_inliers: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { iters: 200, inlier_dist: 0.03, min_inliers: 30 }
    }
}

/// Three-point RANSAC plane fit followed by a least-squares refit on the
/// inliers.
///
/// The returned plane has id 0; callers assign ids. Normal orientation:
/// floors point up, ceilings point down, walls point toward `viewpoint` when
/// given. Returns `None` when the best consensus is below `min_inliers`.
pub fn fit_plane_ransac(
    points: &[Vec3],
    label: PlaneLabel,
    params: &RansacParams,
    viewpoint: Option<&Vec3>,
    rng: &mut impl Rng,
) -> Option<(Plane, Vec<usize>)> {
    if points.len() < 3 || points.len() < params.min_inliers {
        return None;
    }
    let mut best: Option<(Vec3, f64, usize)> = None;
    let mut attempts = 0;
    let mut accepted = 0;
    // Degenerate (collinear) triples are redrawn; the attempt budget keeps a
    // fully collinear input from spinning forever.
    while accepted < params.iters.max(1) && attempts < params.iters.max(1) * 20 {
        attempts += 1;
        let i = rng.gen_range(0..points.len());
        let j = rng.gen_range(0..points.len());
        let k = rng.gen_range(0..points.len());
        if i == j || j == k || i == k {
            continue;
        }
        let n = (points[j] - points[i]).cross(&(points[k] - points[i]));
        let len = n.norm();
        if len < 1e-12 {
            continue;
        }
        accepted += 1;
        let n = n / len;
        let d = -n.dot(&points[i]);
        let count = points.iter().filter(|p| (n.dot(p) + d).abs() <= params.inlier_dist).count();
        if best.map_or(true, |(_, _, c)| count > c) {
            best = Some((n, d, count));
        }
    }
    let (n, d, count) = best?;
    if count < params.min_inliers {
        return None;
    }
    let inliers: Vec<usize> = (0..points.len())
        .filter(|&i| (n.dot(&points[i]) + d).abs() <= params.inlier_dist)
        .collect();
    let (mut normal, centroid) = least_squares_plane(inliers.iter().map(|&i| &points[i]))?;
    let up = Vec3::y();
    let flip = match label {
        PlaneLabel::Floor => normal.dot(&up) < 0.0,
        PlaneLabel::Ceiling => normal.dot(&up) > 0.0,
        PlaneLabel::Wall => viewpoint.map_or(false, |vp| normal.dot(&(vp - centroid)) < 0.0),
    };
    if flip {
        normal = -normal;
    }
    let plane = Plane { id: 0, label, normal, offset: -normal.dot(&centroid) };
    Some((plane, inliers))
}

/// Centroid and smallest-eigenvector normal of a point set.
pub(crate) fn least_squares_plane<'a>(points: impl Iterator<Item = &'a Vec3> + Clone) -> Option<(Vec3, Vec3)> {
    let mut n = 0usize;
    let mut sum = Vec3::zeros();
    for p in points.clone() {
        sum += p;
        n += 1;
    }
    if n < 3 {
        return None;
    }
    let centroid = sum / n as f64;
    let mut cov = Mat3::zeros();
    for p in points {
        let q = p - centroid;
        cov += q * q.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let normal = eig.eigenvectors.column(idx).into_owned().normalize();
    Some((normal, centroid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn floor_points(n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        (0..n)
            .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), 0.0, rng.gen_range(0.0..4.0)))
            .collect()
    }

    #[test]
    fn exact_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = floor_points(200, &mut rng);
        let (plane, inliers) =
            fit_plane_ransac(&pts, PlaneLabel::Floor, &RansacParams::default(), None, &mut rng).unwrap();
        assert_eq!(inliers.len(), 200);
        assert!((plane.normal - Vec3::y()).norm() < 1e-9);
        assert!(plane.offset.abs() < 1e-9);
    }

    #[test]
    fn floor_with_outliers_matches_ground_truth_lsq() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-0.005..0.005), rng.gen_range(0.0..4.0)))
            .collect();
        let truth = least_squares_plane(pts.iter()).unwrap().0;
        for _ in 0..40 {
            pts.push(Vec3::new(rng.gen_range(-2.5..2.5), rng.gen_range(0.0..5.0), rng.gen_range(-0.5..4.5)));
        }
        let params = RansacParams { inlier_dist: 0.03, ..Default::default() };
        let (plane, _) = fit_plane_ransac(&pts, PlaneLabel::Floor, &params, None, &mut rng).unwrap();
        let angle = plane.normal.dot(&truth).abs().clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 1.0, "{angle}");
        let to_up = plane.normal.dot(&Vec3::y()).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(to_up < 1.0, "{to_up}");
    }

    #[test]
    fn too_few_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = floor_points(20, &mut rng);
        let params = RansacParams { min_inliers: 50, ..Default::default() };
        assert!(fit_plane_ransac(&pts, PlaneLabel::Floor, &params, None, &mut rng).is_none());
    }

    #[test]
    fn collinear_input_terminates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(fit_plane_ransac(&pts, PlaneLabel::Floor, &RansacParams::default(), None, &mut rng).is_none());
    }

    #[test]
    fn wall_faces_viewpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(1.5, rng.gen_range(0.0..2.5), rng.gen_range(0.0..5.0)))
            .collect();
        let vp = Vec3::new(0.0, 1.5, 0.0);
        let (plane, _) =
            fit_plane_ransac(&pts, PlaneLabel::Wall, &RansacParams::default(), Some(&vp), &mut rng).unwrap();
        assert!(plane.normal.dot(&(vp - pts[0])) > 0.0);
        assert!((plane.normal.x + 1.0).abs() < 1e-9);
    }
}

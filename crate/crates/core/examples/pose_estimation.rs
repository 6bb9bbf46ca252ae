//! Robust pose refinement from 2D-3D correspondences with a few gross
//! outliers, and a RANSAC floor fit from noisy points.

use ecar::geometry::{fit_plane_ransac, project, solve_pose_gn, CameraIntrinsics, GnParams, RansacParams};
use ecar::graph::PlaneLabel;
use ecar::{Pose, Vec3};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let k = CameraIntrinsics::vga();
    let truth = Pose::look_at(Vec3::new(0.3, 1.5, -1.0), Vec3::new(0.0, 0.0, 3.0), Vec3::y());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.5).unwrap();

    let mut corr = Vec::new();
    while corr.len() < 120 {
        let x = Vec3::new(rng.gen_range(-3.0..3.0), 0.0, rng.gen_range(1.0..8.0));
        if let Some(px) = project(&k, &truth, &x).filter(|p| k.contains(p.x, p.y)) {
            let mut obs = px + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            if corr.len() % 20 == 0 {
                obs.x += 40.0;
            }
            corr.push((x, obs));
        }
    }
    let start = truth.perturbed(&Vec3::new(0.03, -0.02, 0.01), &Vec3::new(0.05, 0.05, -0.08));
    let sol = solve_pose_gn(&k, &corr, &start, &GnParams::default()).expect("well-conditioned");
    println!(
        "start error {:.3} m, solved error {:.4} m, {:.3} deg, {} of {} inliers",
        (start.center() - truth.center()).norm(),
        (sol.pose.center() - truth.center()).norm(),
        sol.pose.rotation_angle_to(&truth).to_degrees(),
        sol.inliers,
        corr.len()
    );

    let mut points: Vec<Vec3> = corr.iter().map(|(x, _)| x + Vec3::new(0.0, 0.01 * noise.sample(&mut rng), 0.0)).collect();
    points.extend((0..30).map(|_| Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.2..2.0), rng.gen_range(1.0..8.0))));
    let (floor, inliers) = fit_plane_ransac(&points, PlaneLabel::Floor, &RansacParams::default(), None, &mut rng)
        .expect("enough floor points");
    println!("floor normal {:.4?} offset {:.4}, {} inliers of {}", floor.normal.as_slice(), floor.offset, inliers.len(), points.len());
}

//! Bundle adjustment of a perturbed synthetic ring with exact observations.

use nalgebra::{Rotation3, Vector3};
use spherical_sfm::bundle::{fix_gauge, solve, BaCamera, BaObservation, BaOptions, BaPoint, BaProblem, CameraFixing};
use spherical_sfm::camera::{project_to_pixel, ImageDims, Intrinsics, Pose};
use spherical_sfm::synth::{generate, Layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = ImageDims::new(2048, 1024)?;
    let scene = generate(Layout::Ring { n: 6, radius: 5.0 }, 200, dims, 9)?;
    let intr = Intrinsics::new(dims);
    let mut observations = Vec::new();
    for (c, pose) in scene.poses.iter().enumerate() {
        for (p, x) in scene.points.iter().enumerate() {
            if scene.visible(c, p) {
                observations.push(BaObservation { camera: c, point: p, pixel: project_to_pixel(x, pose, &intr)?, dims });
            }
        }
    }
    let cameras = scene
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tweak = Rotation3::from_euler_angles(0.5f64.to_radians(), -0.3f64.to_radians(), 0.2f64.to_radians());
            let pose = if i < 2 { *p } else { Pose::new(tweak * p.rotation, p.translation + Vector3::new(0.05, -0.02, 0.03)) };
            BaCamera { pose, fixing: CameraFixing::Free }
        })
        .collect();
    let points = scene.points.iter().map(|x| BaPoint { position: x + Vector3::new(0.02, 0.01, -0.02), fixed: false }).collect();
    let mut problem = BaProblem { cameras, points, observations, loss: Default::default(), pole_weighting: true };
    fix_gauge(&mut problem, 0, 1);
    let report = solve(&mut problem, &BaOptions::default())?;
    println!(
        "{} observations: cost {:.3e} -> {:.3e} in {} iterations, mean reprojection {:.3e} px",
        problem.observations.len(),
        report.initial_cost,
        report.final_cost,
        report.iterations,
        report.mean_reprojection_error
    );
    Ok(())
}

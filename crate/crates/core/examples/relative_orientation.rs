//! Essential matrix estimation with RANSAC, decomposition and refinement on a
//! synthetic pair with 30% outliers.

use spherical_sfm::camera::{rotation_angle, world_to_sphere, ImageDims, SpherePoint};
use spherical_sfm::optim::LmOptions;
use spherical_sfm::synth::{generate, Layout};
use spherical_sfm::two_view::{decompose_essential, estimate_essential_ransac, refine_relative_pose, RansacParams};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = ImageDims::new(2048, 1024)?;
    let scene = generate(Layout::Ring { n: 8, radius: 6.0 }, 120, dims, 3)?;
    let (a, b) = (&scene.poses[0], &scene.poses[1]);
    let mut p1: Vec<SpherePoint> = Vec::new();
    let mut p2: Vec<SpherePoint> = Vec::new();
    for (k, x) in scene.points.iter().enumerate() {
        p1.push(world_to_sphere(x, a)?);
        // Every third correspondence is replaced by a bearing of an unrelated point.
        let other = if k % 3 == 0 { &scene.points[(k * 7 + 11) % scene.points.len()] } else { x };
        p2.push(world_to_sphere(other, b)?);
    }

    let est = estimate_essential_ransac(&p1, &p2, dims, &RansacParams::default())?;
    println!("{} of {} correspondences kept after {} iterations", est.num_inliers(), p1.len(), est.iterations);
    let rel = decompose_essential(&est.essential, &p1, &p2, &est.inliers)?;
    let keep = |v: &[SpherePoint]| v.iter().zip(&est.inliers).filter(|(_, &m)| m).map(|(p, _)| *p).collect::<Vec<_>>();
    let (rel, report) = refine_relative_pose(&rel, &keep(&p1), &keep(&p2), &LmOptions::default());

    let truth = b.compose(&a.inverse());
    println!("rotation error {:.3e} deg", rotation_angle(&rel.rotation, &truth.rotation).to_degrees());
    println!(
        "translation direction error {:.3e} deg",
        rel.translation.angle(&truth.translation.normalize()).to_degrees()
    );
    println!("refinement cost {:.3e} -> {:.3e}", report.initial_cost, report.final_cost);
    Ok(())
}

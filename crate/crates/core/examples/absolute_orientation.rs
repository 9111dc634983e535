//! Camera resection from 2D-3D correspondences with P3P inside RANSAC,
//! including points behind the camera.

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spherical_sfm::camera::{rotation_angle, world_to_sphere, ImageDims, Pose, SpherePoint};
use spherical_sfm::resection::{estimate_pose_ransac, Correspondence2D3D};
use spherical_sfm::two_view::RansacParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = Pose::from_center(Rotation3::from_euler_angles(0.1, -0.7, 0.05), &Vector3::new(2.0, -0.5, 1.0));
    let mut corrs = Vec::new();
    for k in 0..60 {
        let x = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0), rng.random_range(-8.0..8.0));
        let bearing = if k % 4 == 0 {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            SpherePoint::from_vector(&v)?
        } else {
            world_to_sphere(&x, &truth)?
        };
        corrs.push(Correspondence2D3D { bearing, point: x, track_id: k });
    }
    let est = estimate_pose_ransac(&corrs, ImageDims::new(4096, 2048)?, &RansacParams::default())?;
    println!("{} inliers of {} after {} iterations", est.num_inliers(), corrs.len(), est.iterations);
    println!("rotation error {:.3e} deg", rotation_angle(&est.pose.rotation, &truth.rotation).to_degrees());
    println!("center error {:.3e}", (est.pose.center() - truth.center()).norm());
    Ok(())
}

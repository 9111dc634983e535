//! Pixel, longitude/latitude and unit-sphere conversions on a 5640x2820 panorama.

use nalgebra::{Rotation3, Vector3};
use spherical_sfm::camera::{
    geo_to_pixel, geo_to_sphere, pixel_to_geo, project_to_pixel, sphere_to_geo, ImageDims, Intrinsics, PixelCoord, Pose,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let intr = Intrinsics::new(ImageDims::new(5640, 2820)?);
    println!("unit-sphere focal {}, principal point ({}, {})", intr.focal(), intr.cx(), intr.cy());

    for pix in [PixelCoord::new(2820.0, 1410.0), PixelCoord::new(4230.0, 705.0), PixelCoord::new(100.5, 2700.25)] {
        let geo = pixel_to_geo(pix, &intr)?;
        let dir = geo_to_sphere(geo);
        let back = geo_to_pixel(sphere_to_geo(dir.as_vector())?, &intr);
        println!(
            "({:8.2}, {:8.2}) -> theta {:+.4} phi {:+.4} -> [{:+.4} {:+.4} {:+.4}] -> ({:.2}, {:.2})",
            pix.ix, pix.iy, geo.theta, geo.phi, dir.x(), dir.y(), dir.z(), back.ix, back.iy
        );
    }

    // A point behind the camera still has a valid panorama pixel.
    let pose = Pose::from_center(Rotation3::from_euler_angles(0.0, 0.3, 0.0), &Vector3::new(1.0, 0.0, -2.0));
    let behind = Vector3::new(1.0, -0.5, -6.0);
    let pix = project_to_pixel(&behind, &pose, &intr)?;
    println!("point behind the camera lands at ({:.2}, {:.2})", pix.ix, pix.iy);
    Ok(())
}

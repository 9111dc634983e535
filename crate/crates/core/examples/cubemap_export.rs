//! Cube-face rendering and pose update, then an MVS export into a temporary directory.

use nalgebra::Vector3;
use spherical_sfm::camera::{project_to_pixel, ImageDims, Intrinsics};
use spherical_sfm::cli::render_panorama;
use spherical_sfm::cubemap::{export_for_mvs, project_to_face, update_pose, CubeFaceSpec, ErpImage, Face, Interpolation};
use spherical_sfm::engine::Reconstruction;
use spherical_sfm::synth::{generate, image_name, Layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = ImageDims::new(1024, 512)?;
    let scene = generate(Layout::Ring { n: 2, radius: 4.0 }, 300, dims, 2)?;
    let pose = scene.poses[0];
    let x = Vector3::new(0.5, -0.2, 3.0);
    let dir = (pose.transform(&x)).normalize();
    let spec = CubeFaceSpec::new(Face::for_direction(&dir), 512);
    let face_pose = update_pose(&pose, &spec);
    let erp = project_to_pixel(&x, &pose, &Intrinsics::new(dims))?;
    println!("point seen at ERP ({:.2}, {:.2})", erp.ix, erp.iy);
    if let Some(p) = project_to_face(&x, &face_pose, &spec) {
        println!("and at ({:.2}, {:.2}) on the {} face", p.ix, p.iy, spec.face.name());
    }
    println!("face camera center {:?} equals panorama center {:?}", face_pose.center(), pose.center());

    let mut recon = Reconstruction::default();
    for (i, p) in scene.poses.iter().enumerate() {
        recon.registered.insert(i, *p);
    }
    let images: Vec<ErpImage> = (0..2).map(|i| ErpImage { name: image_name(i), raster: render_panorama(&scene, i) }).collect();
    let out = std::env::temp_dir().join("sphsfm_cubemap_example");
    let summary = export_for_mvs(&recon, &images, 256, Interpolation::Bilinear, &out)?;
    println!("{} faces, manifest at {}", summary.faces, summary.manifest.display());
    Ok(())
}

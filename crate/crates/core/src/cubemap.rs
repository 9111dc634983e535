//! Six-face perspective resampling of oriented spherical images.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{geo_to_pixel, sphere_to_geo, ImageDims, Intrinsics, PixelCoord, Pose, SpherePoint};
use crate::engine::Reconstruction;

#[derive(Debug, Error)]
pub enum CubemapError {
    #[error("nothing to export: reconstruction has no registered images")]
    Empty,
    #[error("no raster for registered image {0}")]
    MissingImage(usize),
    #[error("face size must be positive")]
    InvalidSize,
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image encoding failed at {path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Face {
    Front,
    Back,
    Left,
    Right,
    Up,
    Down,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Front, Face::Back, Face::Left, Face::Right, Face::Up, Face::Down];

    pub fn name(&self) -> &'static str {
        match self {
            Face::Front => "front",
            Face::Back => "back",
            Face::Left => "left",
            Face::Right => "right",
            Face::Up => "up",
            Face::Down => "down",
        }
    }

    /// Rotation taking sphere-frame vectors into this face's camera frame.
    /// Rows are the face axes expressed in the sphere frame.
    pub fn rotation(&self) -> Rotation3<f64> {
        let (x, y, z) = match self {
            Face::Front => (Vector3::x(), Vector3::y(), Vector3::z()),
            Face::Back => (-Vector3::x(), Vector3::y(), -Vector3::z()),
            Face::Left => (Vector3::z(), Vector3::y(), -Vector3::x()),
            Face::Right => (-Vector3::z(), Vector3::y(), Vector3::x()),
            Face::Up => (Vector3::x(), Vector3::z(), -Vector3::y()),
            Face::Down => (Vector3::x(), -Vector3::z(), Vector3::y()),
        };
        Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
    }

    /// The face whose frustum contains `dir`; ties go to the earlier face.
    pub fn for_direction(dir: &Vector3<f64>) -> Face {
        let mut best = (Face::Front, f64::NEG_INFINITY);
        for f in Face::ALL {
            let axis = f.rotation().inverse() * Vector3::z();
            let c = axis.dot(dir);
            if c > best.1 {
                best = (f, c);
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Bicubic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubeFaceSpec {
    pub face: Face,
    pub size: u32,
    pub kp: Matrix3<f64>,
    pub r_ps: Rotation3<f64>,
}

pub const DEFAULT_FACE_SIZE: u32 = 1024;

impl CubeFaceSpec {
    pub fn new(face: Face, size: u32) -> Self {
        let f = size as f64 / 2.0;
        CubeFaceSpec {
            face,
            size,
            kp: Matrix3::new(f, 0.0, f, 0.0, f, f, 0.0, 0.0, 1.0),
            r_ps: face.rotation(),
        }
    }

    pub fn focal(&self) -> f64 {
        self.kp[(0, 0)]
    }

    /// Pixel of a face-frame direction, if it lies in front of the face plane.
    pub fn project(&self, dir: &Vector3<f64>) -> Option<PixelCoord> {
        if dir.z <= 0.0 {
            return None;
        }
        let h = self.kp * (dir / dir.z);
        Some(PixelCoord::new(h.x, h.y))
    }
}

/// Sphere-frame viewing direction of a face pixel.
pub fn face_pixel_to_sphere_dir(x: PixelCoord, spec: &CubeFaceSpec) -> SpherePoint {
    let kinv = spec.kp.try_inverse().expect("face intrinsics are invertible");
    let u = (kinv * Vector3::new(x.ix, x.iy, 1.0)).normalize();
    let v = spec.r_ps.inverse() * u;
    SpherePoint::from_vector(&v).expect("non-zero direction")
}

/// World-to-face pose sharing the spherical camera's projection center.
pub fn update_pose(pose: &Pose, spec: &CubeFaceSpec) -> Pose {
    let r_p = spec.r_ps * pose.rotation;
    let center = -(pose.rotation.inverse() * pose.translation);
    Pose::new(r_p, -(r_p * center))
}

/// Projects a world point through a face camera (intrinsics + updated pose).
pub fn project_to_face(world: &Vector3<f64>, face_pose: &Pose, spec: &CubeFaceSpec) -> Option<PixelCoord> {
    spec.project(&face_pose.transform(world))
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor(), y.floor());
    let (ax, ay) = (x - x0, y - y0);
    let mut out = [0.0; 3];
    for (dy, wy) in [(0i64, 1.0 - ay), (1, ay)] {
        let yy = (y0 as i64 + dy).clamp(0, h - 1) as u32;
        for (dx, wx) in [(0i64, 1.0 - ax), (1, ax)] {
            let xx = (x0 as i64 + dx).rem_euclid(w) as u32;
            let p = img.get_pixel(xx, yy);
            for c in 0..3 {
                out[c] += wx * wy * p[c] as f64;
            }
        }
    }
    out
}

fn cubic_weights(t: f64) -> [f64; 4] {
    // Catmull-Rom
    let t2 = t * t;
    let t3 = t2 * t;
    [
        -0.5 * t3 + t2 - 0.5 * t,
        1.5 * t3 - 2.5 * t2 + 1.0,
        -1.5 * t3 + 2.0 * t2 + 0.5 * t,
        0.5 * t3 - 0.5 * t2,
    ]
}

fn sample_bicubic(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (wx, wy) = (cubic_weights(x - x0 as f64), cubic_weights(y - y0 as f64));
    let mut out = [0.0; 3];
    for (j, wyj) in wy.iter().enumerate() {
        let yy = (y0 + j as i64 - 1).clamp(0, h - 1) as u32;
        for (i, wxi) in wx.iter().enumerate() {
            let xx = (x0 + i as i64 - 1).rem_euclid(w) as u32;
            let p = img.get_pixel(xx, yy);
            for c in 0..3 {
                out[c] += wxi * wyj * p[c] as f64;
            }
        }
    }
    out
}

/// Resamples one cube face from an ERP raster, wrapping horizontally at the
/// seam and clamping vertically at the poles.
pub fn render_face(erp: &RgbImage, spec: &CubeFaceSpec, interp: Interpolation) -> RgbImage {
    let dims = ImageDims::new(erp.width(), erp.height()).expect("non-empty raster");
    let intr = Intrinsics::new(dims);
    let size = spec.size;
    let rows: Vec<Vec<Rgb<u8>>> = (0..size)
        .into_par_iter()
        .map(|y| {
            (0..size)
                .map(|x| {
                    let dir = face_pixel_to_sphere_dir(PixelCoord::new(x as f64, y as f64), spec);
                    let geo = sphere_to_geo(dir.as_vector()).expect("unit direction");
                    let p = geo_to_pixel(geo, &intr);
                    let v = match interp {
                        Interpolation::Bilinear => sample_bilinear(erp, p.ix, p.iy),
                        Interpolation::Bicubic => sample_bicubic(erp, p.ix, p.iy),
                    };
                    Rgb(v.map(|c| c.round().clamp(0.0, 255.0) as u8))
                })
                .collect()
        })
        .collect();
    let mut out = RgbImage::new(size, size);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, px) in row.into_iter().enumerate() {
            out.put_pixel(x as u32, y as u32, px);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CubeFaceImage {
    pub spec: CubeFaceSpec,
    pub raster: RgbImage,
    pub pose: Pose,
}

pub fn make_face(erp: &RgbImage, pose: &Pose, spec: CubeFaceSpec, interp: Interpolation) -> CubeFaceImage {
    CubeFaceImage {
        spec,
        raster: render_face(erp, &spec, interp),
        pose: update_pose(pose, &spec),
    }
}

/// Unit quaternion `(w, x, y, z)` with a non-negative scalar part.
pub fn canonical_quaternion(r: &Rotation3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(r);
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

/// Face camera file: intrinsics line and pose line.
pub fn face_camera_text(face: &CubeFaceImage) -> String {
    let k = &face.spec.kp;
    let q = canonical_quaternion(&face.pose.rotation);
    let t = face.pose.translation;
    format!(
        "PINHOLE {} {} {:.16e} {:.16e} {:.16e} {:.16e}\nPOSE {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}\n",
        face.spec.size, face.spec.size, k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], q[0], q[1], q[2], q[3], t.x, t.y, t.z
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub faces: usize,
    pub manifest: PathBuf,
    pub points_file: PathBuf,
}

/// A spherical raster and the name used for its output files.
#[derive(Debug, Clone, PartialEq)]
pub struct ErpImage {
    pub name: String,
    pub raster: RgbImage,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CubemapError + '_ {
    move |source| CubemapError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes six faces and camera files per registered image, a manifest with one
/// line per face, and the shared sparse points.
pub fn export_for_mvs(
    recon: &Reconstruction,
    images: &[ErpImage],
    face_size: u32,
    interp: Interpolation,
    out_dir: &Path,
) -> Result<ExportSummary, CubemapError> {
    if recon.registered.is_empty() {
        return Err(CubemapError::Empty);
    }
    if face_size == 0 {
        return Err(CubemapError::InvalidSize);
    }
    for &i in recon.registered.keys() {
        if i >= images.len() {
            return Err(CubemapError::MissingImage(i));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let jobs: Vec<(usize, Face)> = recon
        .registered
        .keys()
        .flat_map(|&i| Face::ALL.into_iter().map(move |f| (i, f)))
        .collect();
    let written: Result<Vec<(String, String, String, String)>, CubemapError> = jobs
        .par_iter()
        .map(|&(i, face)| {
            let img = &images[i];
            let spec = CubeFaceSpec::new(face, face_size);
            let cube = make_face(&img.raster, &recon.registered[&i], spec, interp);
            let image_file = format!("{}_{}.png", img.name, face.name());
            let camera_file = format!("{}_{}.txt", img.name, face.name());
            let ipath = out_dir.join(&image_file);
            cube.raster.save(&ipath).map_err(|source| CubemapError::Encode {
                path: ipath.clone(),
                source,
            })?;
            let cpath = out_dir.join(&camera_file);
            fs::write(&cpath, face_camera_text(&cube)).map_err(io_err(&cpath))?;
            Ok((img.name.clone(), face.name().to_string(), camera_file, image_file))
        })
        .collect();
    let written = written?;
    let mut manifest = String::new();
    for (img, face, cam, file) in &written {
        writeln!(manifest, "{img} {face} {cam} {file}").unwrap();
    }
    let manifest_path = out_dir.join("manifest.txt");
    fs::write(&manifest_path, manifest).map_err(io_err(&manifest_path))?;
    let mut pts = format!("POINTS {}\n", recon.points.len());
    for p in &recon.points {
        writeln!(
            pts,
            "{:.16e} {:.16e} {:.16e} {} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.color[0], p.color[1], p.color[2], p.track
        )
        .unwrap();
    }
    let points_path = out_dir.join("points.txt");
    fs::write(&points_path, pts).map_err(io_err(&points_path))?;
    Ok(ExportSummary {
        faces: written.len(),
        manifest: manifest_path,
        points_file: points_path,
    })
}

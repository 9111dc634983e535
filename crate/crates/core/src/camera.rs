//! Unit-sphere camera model for equirectangular (ERP) panoramas.
//!
//! Four coordinate frames are chained together:
//!
//! * ERP pixels `(ix, iy)`: column rightward, row downward, continuous, with
//!   `(0, 0)` at the top-left corner of the top-left pixel.
//! * Spherical geographic `(theta, phi)`: longitude in `[-pi, pi)` and
//!   latitude in `[-pi/2, pi/2]`.
//! * Spherical Cartesian: a unit vector `p = (cos phi sin theta, -sin phi, cos phi cos theta)`.
//! * World: `P = R * Pw + T`, `p = P / |P|`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

/// Distance below which a world point is considered to sit on the camera center.
pub const EPS_DEPTH: f64 = 1e-12;

/// Tolerance used when checking that a vector handed in as a sphere point is unit length.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDims { width: u32, height: u32 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("vector is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("point projects from the camera center")]
    ProjectionAtCenter,
    #[error("rotation is not proper orthonormal")]
    InvalidRotation,
}

/// ERP raster size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeomError> {
        if width < 2 || height < 1 {
            return Err(GeomError::InvalidDims { width, height });
        }
        let dims = ImageDims { width, height };
        if !dims.is_standard_erp() {
            log::warn!("image {width}x{height} is not a 2:1 equirectangular raster");
        }
        Ok(dims)
    }

    pub fn is_standard_erp(&self) -> bool {
        self.width == 2 * self.height
    }

    pub fn w(&self) -> f64 {
        self.width as f64
    }

    pub fn h(&self) -> f64 {
        self.height as f64
    }

    pub fn max_side(&self) -> f64 {
        self.width.max(self.height) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PixelCoord {
    pub ix: f64,
    pub iy: f64,
}

impl PixelCoord {
    pub fn new(ix: f64, iy: f64) -> Self {
        PixelCoord { ix, iy }
    }

    pub fn is_finite(&self) -> bool {
        self.ix.is_finite() && self.iy.is_finite()
    }
}

/// Longitude `theta` and latitude `phi`, both in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeoCoord {
    pub theta: f64,
    pub phi: f64,
}

impl GeoCoord {
    pub fn new(theta: f64, phi: f64) -> Self {
        GeoCoord { theta, phi }
    }

    /// Maps any finite pair into `theta in [-pi, pi)`, `phi in [-pi/2, pi/2]`.
    ///
    /// Latitudes past a pole are reflected back over it, which moves the
    /// longitude half a turn. Values already in range are returned untouched.
    pub fn normalized(self) -> Self {
        let mut theta = self.theta;
        let mut phi = self.phi;
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&phi) {
            phi = (phi + PI).rem_euclid(TAU) - PI;
            if phi > FRAC_PI_2 {
                phi = PI - phi;
                theta += PI;
            } else if phi < -FRAC_PI_2 {
                phi = -PI - phi;
                theta += PI;
            }
        }
        if !(-PI..PI).contains(&theta) {
            theta = (theta + PI).rem_euclid(TAU) - PI;
            if theta >= PI {
                theta -= TAU;
            }
        }
        if phi.abs() == FRAC_PI_2 {
            theta = 0.0;
        }
        GeoCoord { theta, phi }
    }
}

/// A unit direction on the camera sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint(Vector3<f64>);

impl SpherePoint {
    /// Normalizes `v`; fails for zero or non-finite vectors.
    pub fn from_vector(v: &Vector3<f64>) -> Result<Self, GeomError> {
        let n = v.norm();
        if !n.is_finite() {
            return Err(GeomError::NonFinite);
        }
        if n <= EPS_DEPTH {
            return Err(GeomError::ProjectionAtCenter);
        }
        Ok(SpherePoint(v / n))
    }

    /// Accepts `v` only if it is already unit length within [`UNIT_TOLERANCE`].
    pub fn try_from_unit(v: &Vector3<f64>) -> Result<Self, GeomError> {
        let n = v.norm();
        if !n.is_finite() {
            return Err(GeomError::NonFinite);
        }
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(GeomError::NotUnit(n));
        }
        Ok(SpherePoint(v / n))
    }

    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeomError> {
        Self::from_vector(&Vector3::new(x, y, z))
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn to_geo(&self) -> GeoCoord {
        unit_to_geo(&self.0)
    }

    /// Angle between two directions, stable for small and large angles.
    pub fn angle_to(&self, other: &SpherePoint) -> f64 {
        self.0.cross(&other.0).norm().atan2(self.0.dot(&other.0))
    }
}

/// Rigid world-to-camera transform `P = R * Pw + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a raw matrix, rejecting anything that is not a proper rotation.
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(orth <= 1e-10) || (rotation.determinant() - 1.0).abs() > 1e-10 {
            return Err(GeomError::InvalidRotation);
        }
        Ok(Pose {
            rotation: Rotation3::from_matrix_unchecked(*rotation),
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose of a camera with world→camera rotation `rotation` centered at `center`.
    pub fn from_center(rotation: Rotation3<f64>, center: &Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Projection center in world coordinates, `-R^T T`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Intrinsics of the spherical camera: only the raster size is free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Intrinsics {
    pub dims: ImageDims,
}

impl Intrinsics {
    pub fn new(dims: ImageDims) -> Self {
        Intrinsics { dims }
    }

    pub fn focal(&self) -> f64 {
        1.0
    }

    pub fn cx(&self) -> f64 {
        self.dims.w() / 2.0
    }

    pub fn cy(&self) -> f64 {
        self.dims.h() / 2.0
    }
}

pub fn pixel_to_geo(pix: PixelCoord, intr: &Intrinsics) -> Result<GeoCoord, GeomError> {
    if !pix.is_finite() {
        return Err(GeomError::NonFinite);
    }
    let theta = (pix.ix - intr.cx()) * TAU / intr.dims.w();
    let phi = (intr.cy() - pix.iy) * PI / intr.dims.h();
    Ok(GeoCoord { theta, phi }.normalized())
}

pub fn geo_to_sphere(g: GeoCoord) -> SpherePoint {
    let (sin_t, cos_t) = g.theta.sin_cos();
    let (sin_p, cos_p) = g.phi.sin_cos();
    let v = Vector3::new(cos_p * sin_t, -sin_p, cos_p * cos_t);
    // Already unit up to rounding; renormalize to keep the invariant tight.
    SpherePoint(v / v.norm())
}

fn unit_to_geo(v: &Vector3<f64>) -> GeoCoord {
    let phi = (-v.y).clamp(-1.0, 1.0).asin();
    // Latitude from the horizontal norm is better conditioned near the poles.
    let horiz = v.x.hypot(v.z);
    let phi = if horiz < 0.5 {
        (-v.y).atan2(horiz)
    } else {
        phi
    };
    if horiz == 0.0 {
        return GeoCoord {
            theta: 0.0,
            phi: if v.y < 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 },
        };
    }
    let mut theta = v.x.atan2(v.z);
    if theta >= PI {
        theta -= TAU;
    }
    GeoCoord { theta, phi }
}

/// Inverse of [`geo_to_sphere`] for a raw vector that should be unit length.
pub fn sphere_to_geo(v: &Vector3<f64>) -> Result<GeoCoord, GeomError> {
    let n = v.norm();
    if !n.is_finite() {
        return Err(GeomError::NonFinite);
    }
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(GeomError::NotUnit(n));
    }
    Ok(unit_to_geo(v))
}

pub fn geo_to_pixel(g: GeoCoord, intr: &Intrinsics) -> PixelCoord {
    PixelCoord {
        ix: intr.cx() + g.theta * intr.dims.w() / TAU,
        iy: intr.cy() - g.phi * intr.dims.h() / PI,
    }
}

pub fn world_to_sphere(world: &Vector3<f64>, pose: &Pose) -> Result<SpherePoint, GeomError> {
    let p = pose.transform(world);
    let n = p.norm();
    if !n.is_finite() {
        return Err(GeomError::NonFinite);
    }
    if n <= EPS_DEPTH {
        return Err(GeomError::ProjectionAtCenter);
    }
    Ok(SpherePoint(p / n))
}

pub fn project_to_pixel(world: &Vector3<f64>, pose: &Pose, intr: &Intrinsics) -> Result<PixelCoord, GeomError> {
    let p = world_to_sphere(world, pose)?;
    Ok(geo_to_pixel(p.to_geo(), intr))
}

/// Lifts an ERP pixel straight to its viewing direction.
pub fn pixel_to_sphere(pix: PixelCoord, intr: &Intrinsics) -> Result<SpherePoint, GeomError> {
    pixel_to_geo(pix, intr).map(geo_to_sphere)
}

/// Wraps the column modulo the width and clamps the row to `[0, H]`.
pub fn wrap_pixel(pix: PixelCoord, dims: ImageDims) -> PixelCoord {
    let w = dims.w();
    let mut ix = pix.ix.rem_euclid(w);
    if ix >= w {
        ix = 0.0;
    }
    PixelCoord {
        ix,
        iy: pix.iy.clamp(0.0, dims.h()),
    }
}

/// Geodesic angle between two rotations, accurate near zero.
pub fn rotation_angle(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let q = UnitQuaternion::from_rotation_matrix(&(a.inverse() * b));
    2.0 * q.imag().norm().atan2(q.w.abs())
}

/// Skew-symmetric cross-product matrix `[v]_x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn erp() -> Intrinsics {
        Intrinsics::new(ImageDims::new(5640, 2820).unwrap())
    }

    #[test]
    fn pixel_to_geo_reference_points() {
        let intr = erp();
        let g = pixel_to_geo(PixelCoord::new(2820.0, 1410.0), &intr).unwrap();
        assert_eq!((g.theta, g.phi), (0.0, 0.0));
        let g = pixel_to_geo(PixelCoord::new(4230.0, 1410.0), &intr).unwrap();
        assert!(close(g.theta, FRAC_PI_2, 1e-12) && g.phi == 0.0);
        let g = pixel_to_geo(PixelCoord::new(2820.0, 0.0), &intr).unwrap();
        assert!(close(g.phi, FRAC_PI_2, 1e-12) && g.theta == 0.0);
        assert_eq!(
            pixel_to_geo(PixelCoord::new(f64::NAN, 0.0), &intr),
            Err(GeomError::NonFinite)
        );
    }

    #[test]
    fn geo_to_sphere_reference_points() {
        let p = geo_to_sphere(GeoCoord::new(0.0, 0.0));
        assert_eq!(*p.as_vector(), Vector3::new(0.0, 0.0, 1.0));
        let p = geo_to_sphere(GeoCoord::new(FRAC_PI_2, 0.0));
        assert!((p.as_vector() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
        let p = geo_to_sphere(GeoCoord::new(0.0, FRAC_PI_2));
        assert!((p.as_vector() - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn sphere_to_geo_reference_points() {
        let g = sphere_to_geo(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((g.theta, g.phi), (0.0, 0.0));
        let g = sphere_to_geo(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!(close(g.theta, FRAC_PI_2, 1e-15) && g.phi == 0.0);
        let g = sphere_to_geo(&Vector3::new(0.0, -1.0, 0.0)).unwrap();
        assert_eq!((g.theta, g.phi), (0.0, FRAC_PI_2));
        assert!(matches!(
            sphere_to_geo(&Vector3::new(0.0, 0.0, 1.1)),
            Err(GeomError::NotUnit(_))
        ));
    }

    #[test]
    fn geo_to_pixel_reference_points() {
        let intr = erp();
        assert_eq!(geo_to_pixel(GeoCoord::new(0.0, 0.0), &intr), PixelCoord::new(2820.0, 1410.0));
        let p = geo_to_pixel(GeoCoord::new(FRAC_PI_2, 0.0), &intr);
        assert!(close(p.ix, 4230.0, 1e-9) && p.iy == 1410.0);
    }

    #[test]
    fn world_projection_reference_points() {
        let id = Pose::identity();
        let p = world_to_sphere(&Vector3::new(0.0, 0.0, 5.0), &id).unwrap();
        assert_eq!(*p.as_vector(), Vector3::new(0.0, 0.0, 1.0));
        let p = world_to_sphere(&Vector3::new(3.0, 0.0, 4.0), &id).unwrap();
        assert!((p.as_vector() - Vector3::new(0.6, 0.0, 0.8)).norm() < 1e-15);
        let shifted = Pose::new(Rotation3::identity(), Vector3::new(0.0, 0.0, -5.0));
        assert_eq!(
            world_to_sphere(&Vector3::new(0.0, 0.0, 5.0), &shifted),
            Err(GeomError::ProjectionAtCenter)
        );
        let intr = erp();
        let px = project_to_pixel(&Vector3::new(0.0, 0.0, 5.0), &id, &intr).unwrap();
        assert_eq!(px, PixelCoord::new(2820.0, 1410.0));
        let px = project_to_pixel(&Vector3::new(5.0, 0.0, 0.0), &id, &intr).unwrap();
        assert!(close(px.ix, 4230.0, 1e-9) && px.iy == 1410.0);
        assert_eq!(
            project_to_pixel(&Vector3::new(0.0, 0.0, 5.0), &shifted, &intr),
            Err(GeomError::ProjectionAtCenter)
        );
    }

    #[test]
    fn wrap_pixel_cases() {
        let dims = ImageDims::new(5640, 2820).unwrap();
        assert_eq!(wrap_pixel(PixelCoord::new(-10.0, 100.0), dims), PixelCoord::new(5630.0, 100.0));
        assert_eq!(wrap_pixel(PixelCoord::new(5640.0, 100.0), dims), PixelCoord::new(0.0, 100.0));
        assert_eq!(wrap_pixel(PixelCoord::new(100.0, -5.0), dims), PixelCoord::new(100.0, 0.0));
        let tiny = wrap_pixel(PixelCoord::new(-1e-17, 1.0), dims);
        assert!(tiny.ix >= 0.0 && tiny.ix < 5640.0);
    }

    #[test]
    fn dims_validation() {
        assert!(ImageDims::new(1, 1).is_err());
        assert!(ImageDims::new(2, 0).is_err());
        // Non-2:1 rasters are accepted with a warning.
        assert!(!ImageDims::new(1000, 800).unwrap().is_standard_erp());
    }

    #[test]
    fn pose_from_matrix_rejects_reflections() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert_eq!(Pose::from_matrix(&m, Vector3::zeros()), Err(GeomError::InvalidRotation));
        assert!(Pose::from_matrix(&Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    #[test]
    fn geo_normalization_past_pole() {
        let g = GeoCoord::new(0.0, FRAC_PI_2 + 0.1).normalized();
        assert!(close(g.phi, FRAC_PI_2 - 0.1, 1e-15));
        assert!(close(g.theta, -PI, 1e-15));
        let g = GeoCoord::new(PI, 0.0).normalized();
        assert!(close(g.theta, -PI, 1e-15));
    }

    #[test]
    fn equator_maps_to_middle_row() {
        let intr = Intrinsics::new(ImageDims::new(1001, 499).unwrap());
        for k in 0..50 {
            let theta = -PI + k as f64 * 0.12;
            assert_eq!(geo_to_pixel(GeoCoord::new(theta, 0.0), &intr).iy, intr.cy());
        }
    }

    proptest! {
        #[test]
        fn pixel_round_trip(ix in 0.001f64..5639.999, iy in 0.001f64..2819.999) {
            let intr = erp();
            let pix = PixelCoord::new(ix, iy);
            let back = geo_to_pixel(pixel_to_geo(pix, &intr).unwrap(), &intr);
            prop_assert!((back.ix - ix).abs() <= 1e-9 && (back.iy - iy).abs() <= 1e-9);
        }

        #[test]
        fn sphere_round_trip(theta in -PI..PI, z in -1.0f64..1.0) {
            let r = (1.0 - z * z).sqrt();
            let v = Vector3::new(r * theta.cos(), z, r * theta.sin());
            let p = geo_to_sphere(sphere_to_geo(&v).unwrap());
            prop_assert!((p.as_vector() - v).norm() <= 1e-12);
        }

        #[test]
        fn geo_to_sphere_is_unit(theta in -1e3f64..1e3, phi in -1e3f64..1e3) {
            let p = geo_to_sphere(GeoCoord::new(theta, phi));
            prop_assert!((p.as_vector().norm() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn projection_invariant_along_ray(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            px in -20.0f64..20.0, py in -20.0f64..20.0, pz in -20.0f64..20.0,
            s in 0.01f64..100.0,
        ) {
            let pose = Pose::new(Rotation3::new(Vector3::new(ax, ay, az)), Vector3::new(tx, ty, tz));
            let c = pose.center();
            let pw = Vector3::new(px, py, pz);
            prop_assume!((pw - c).norm() > 1e-3);
            let intr = erp();
            let a = project_to_pixel(&pw, &pose, &intr).unwrap();
            let b = project_to_pixel(&(c + s * (pw - c)), &pose, &intr).unwrap();
            let dx = (a.ix - b.ix).abs();
            // Points straddling the seam land on opposite edges.
            let dx = dx.min((dx - intr.dims.w()).abs());
            prop_assert!(dx < 1e-6 && (a.iy - b.iy).abs() < 1e-6);
        }
    }
}

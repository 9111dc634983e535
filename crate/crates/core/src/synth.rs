//! Ground-truth scenes, simulated observations and reconstruction comparison.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{project_to_pixel, rotation_angle, wrap_pixel, ImageDims, Intrinsics, PixelCoord, Pose};
use crate::features::{Feature, GraphImage, MatchGraph, MatchPair};
use crate::two_view::EssentialMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("a scene needs at least 2 cameras and 8 points (got {cameras} and {points})")]
    TooSmall { cameras: usize, points: usize },
    #[error("invalid scene parameter: {0}")]
    InvalidParameter(String),
    #[error("alignment needs at least 3 common cameras, got {0}")]
    TooFewCameras(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Layout {
    /// Cameras on a horizontal circle, looking along the tangent.
    Ring { n: usize, radius: f64 },
    /// Cameras on a straight line, `step` apart, looking along it.
    Corridor { n: usize, step: f64 },
    /// Two stacked rings, half of the cameras on each.
    TwoFloors { n: usize },
}

impl Layout {
    pub fn num_cameras(&self) -> usize {
        match *self {
            Layout::Ring { n, .. } | Layout::Corridor { n, .. } | Layout::TwoFloors { n } => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub poses: Vec<Pose>,
    pub points: Vec<Vector3<f64>>,
    pub colors: Vec<[u8; 3]>,
    pub dims: ImageDims,
    pub noise_px: f64,
    pub outlier_rate: f64,
    pub rng_seed: u64,
    pub descriptor_dim: usize,
    /// Points farther than this from a camera are not observed by it.
    pub max_range: Option<f64>,
}

/// World-to-camera rotation for a camera whose optical axis points along `forward`,
/// with the image "down" axis along world +Y.
pub fn heading_rotation(forward: &Vector3<f64>) -> Rotation3<f64> {
    let z = forward.normalize();
    let down = Vector3::y();
    let y = (down - z * z.dot(&down)).normalize();
    let x = y.cross(&z);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]).transpose())
}

fn sample_points<F>(rng: &mut ChaCha8Rng, n: usize, centers: &[Vector3<f64>], min_dist: f64, mut draw: F) -> Vec<Vector3<f64>>
where
    F: FnMut(&mut ChaCha8Rng) -> Vector3<f64>,
{
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = draw(rng);
        if centers.iter().all(|c| (p - c).norm() > min_dist) {
            out.push(p);
        }
    }
    out
}

fn disc(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    loop {
        let (x, z) = (rng.random_range(-radius..radius), rng.random_range(-radius..radius));
        if x * x + z * z <= radius * radius {
            return (x, z);
        }
    }
}

/// Deterministic camera layout with points scattered uniformly in the scene volume.
pub fn generate(layout: Layout, n_points: usize, dims: ImageDims, seed: u64) -> Result<SyntheticScene, SynthError> {
    let n = layout.num_cameras();
    if n < 2 || n_points < 8 {
        return Err(SynthError::TooSmall { cameras: n, points: n_points });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (poses, points, max_range) = match layout {
        Layout::Ring { radius, .. } => {
            if !(radius > 0.0) {
                return Err(SynthError::InvalidParameter("ring radius must be positive".into()));
            }
            let poses = ring_poses(n, radius, 0.0, 0.0);
            let centers: Vec<_> = poses.iter().map(Pose::center).collect();
            let points = sample_points(&mut rng, n_points, &centers, 0.1 * radius, |r| {
                let (x, z) = disc(r, 1.5 * radius);
                Vector3::new(x, r.random_range(-0.3 * radius..0.3 * radius), z)
            });
            (poses, points, None)
        }
        Layout::Corridor { step, .. } => {
            if !(step > 0.0) {
                return Err(SynthError::InvalidParameter("corridor step must be positive".into()));
            }
            let rot = heading_rotation(&Vector3::z());
            let poses: Vec<Pose> = (0..n)
                .map(|i| Pose::from_center(rot, &Vector3::new(0.0, 0.0, i as f64 * step)))
                .collect();
            let centers: Vec<_> = poses.iter().map(Pose::center).collect();
            let length = (n - 1) as f64 * step;
            let half_width = 1.5 * step;
            let points = sample_points(&mut rng, n_points, &centers, 0.3 * step, |r| {
                Vector3::new(
                    r.random_range(-half_width..half_width),
                    r.random_range(-step..0.5 * step),
                    r.random_range(-2.0 * step..length + 2.0 * step),
                )
            });
            (poses, points, Some(5.0 * step))
        }
        Layout::TwoFloors { .. } => {
            let radius = 8.0;
            let lower = n.div_ceil(2);
            let mut poses = ring_poses(lower, radius, 0.0, 0.0);
            poses.extend(ring_poses(n - lower, radius, -4.0, std::f64::consts::PI / n as f64));
            let centers: Vec<_> = poses.iter().map(Pose::center).collect();
            let points = sample_points(&mut rng, n_points, &centers, 0.1 * radius, |r| {
                let (x, z) = disc(r, 1.5 * radius);
                Vector3::new(x, r.random_range(-7.0..2.0), z)
            });
            (poses, points, None)
        }
    };
    let colors = (0..points.len()).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    Ok(SyntheticScene {
        poses,
        points,
        colors,
        dims,
        noise_px: 0.0,
        outlier_rate: 0.0,
        rng_seed: seed,
        descriptor_dim: 32,
        max_range,
    })
}

fn ring_poses(n: usize, radius: f64, height: f64, phase: f64) -> Vec<Pose> {
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            let center = Vector3::new(radius * a.sin(), height, radius * a.cos());
            let tangent = Vector3::new(a.cos(), 0.0, -a.sin());
            Pose::from_center(heading_rotation(&tangent), &center)
        })
        .collect()
}

impl SyntheticScene {
    pub fn with_noise(mut self, noise_px: f64) -> Self {
        self.noise_px = noise_px;
        self
    }

    pub fn with_outliers(mut self, rate: f64) -> Self {
        self.outlier_rate = rate;
        self
    }

    /// Largest distance between any two camera centers or points.
    pub fn diameter(&self) -> f64 {
        let all: Vec<Vector3<f64>> = self.poses.iter().map(Pose::center).chain(self.points.iter().copied()).collect();
        let (mut lo, mut hi) = (all[0], all[0]);
        for p in &all {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }

    pub fn visible(&self, camera: usize, point: usize) -> bool {
        let d = (self.points[point] - self.poses[camera].center()).norm();
        d > 1e-9 && self.max_range.is_none_or(|r| d <= r)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_px >= 0.0) {
            return Err(SynthError::InvalidParameter("noise must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(SynthError::InvalidParameter("outlier rate must be in [0, 1)".into()));
        }
        if self.descriptor_dim == 0 {
            return Err(SynthError::InvalidParameter("descriptor dimension must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth for one synthetic feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationTruth {
    pub point: usize,
    pub outlier: bool,
    pub true_pix: PixelCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObservations {
    pub images: Vec<GraphImage>,
    pub truth: Vec<Vec<ObservationTruth>>,
}

impl SyntheticObservations {
    /// Match graph containing exactly the intended correspondences, with inlier
    /// masks from the ground-truth labels and the true essential matrices.
    pub fn true_graph(&self, scene: &SyntheticScene) -> MatchGraph {
        let mut pairs = Vec::new();
        for a in 0..self.images.len() {
            let index_a: std::collections::HashMap<usize, usize> =
                self.truth[a].iter().enumerate().map(|(f, t)| (t.point, f)).collect();
            for b in a + 1..self.images.len() {
                let mut matches = Vec::new();
                let mut mask = Vec::new();
                for (fb, tb) in self.truth[b].iter().enumerate() {
                    if let Some(&fa) = index_a.get(&tb.point) {
                        matches.push((fa, fb));
                        mask.push(!self.truth[a][fa].outlier && !tb.outlier);
                    }
                }
                if matches.is_empty() {
                    continue;
                }
                let (pa, pb) = (&scene.poses[a], &scene.poses[b]);
                let rel = pb.compose(&pa.inverse());
                let mut pair = MatchPair::new(a, b, matches);
                pair.essential = EssentialMatrix::from_pose(&rel.rotation, &rel.translation).ok().map(|e| e.0);
                pair.verified = mask.iter().filter(|&&m| m).count() >= 8;
                pair.inlier_mask = mask;
                pairs.push(pair);
            }
        }
        MatchGraph::from_pairs(self.images.clone(), pairs)
    }

    pub fn num_observations(&self) -> usize {
        self.truth.iter().map(Vec::len).sum()
    }
}

fn unit_descriptor(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    loop {
        let v: Vec<f32> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Projects every visible point into every camera, adds pixel noise, swaps a
/// fraction of observations for random pixels, and plants descriptors that make
/// each point's observations mutual nearest neighbours.
pub fn observe(scene: &SyntheticScene) -> Result<SyntheticObservations, SynthError> {
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    rng.set_stream(1);
    let dim = scene.descriptor_dim;
    let base: Vec<Vec<f32>> = (0..scene.points.len()).map(|_| unit_descriptor(&mut rng, dim)).collect();
    let noise = Normal::new(0.0, scene.noise_px.max(f64::MIN_POSITIVE)).unwrap();
    let desc_noise = Normal::new(0.0f32, 0.01 / (dim as f32).sqrt()).unwrap();
    let intr = Intrinsics::new(scene.dims);
    let (w, h) = (scene.dims.w(), scene.dims.h());

    let mut images = Vec::with_capacity(scene.poses.len());
    let mut truth = Vec::with_capacity(scene.poses.len());
    for (c, pose) in scene.poses.iter().enumerate() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (p, x) in scene.points.iter().enumerate() {
            if !scene.visible(c, p) {
                continue;
            }
            let Ok(true_pix) = project_to_pixel(x, pose, &intr) else {
                continue;
            };
            let outlier = scene.outlier_rate > 0.0 && rng.random::<f64>() < scene.outlier_rate;
            let pix = if outlier {
                PixelCoord::new(rng.random_range(0.0..w), rng.random_range(0.0..h))
            } else if scene.noise_px > 0.0 {
                let moved = PixelCoord::new(true_pix.ix + noise.sample(&mut rng), true_pix.iy + noise.sample(&mut rng));
                let wrapped = wrap_pixel(moved, scene.dims);
                PixelCoord::new(wrapped.ix, wrapped.iy.clamp(0.0, h - 1e-9))
            } else {
                true_pix
            };
            let mut d: Vec<f32> = base[p].iter().map(|v| v + desc_noise.sample(&mut rng)).collect();
            let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
            d.iter_mut().for_each(|v| *v /= n);
            feats.push(Feature {
                pix,
                scale: 1.0,
                orientation: 0.0,
                descriptor: d,
            });
            labels.push(ObservationTruth { point: p, outlier, true_pix });
        }
        images.push(GraphImage {
            name: image_name(c),
            dims: scene.dims,
            features: feats,
        });
        truth.push(labels);
    }
    Ok(SyntheticObservations { images, truth })
}

pub fn image_name(index: usize) -> String {
    format!("img_{index:03}")
}

/// Spherical projection written out from scratch, sharing no code with the
/// camera module, so the two can be checked against each other.
pub fn oracle_project(rotation: &[[f64; 3]; 3], translation: &[f64; 3], world: &[f64; 3], width: f64, height: f64) -> Option<(f64, f64)> {
    let mut cam = [0.0; 3];
    for (i, c) in cam.iter_mut().enumerate() {
        *c = rotation[i][0] * world[0] + rotation[i][1] * world[1] + rotation[i][2] * world[2] + translation[i];
    }
    let norm = (cam[0] * cam[0] + cam[1] * cam[1] + cam[2] * cam[2]).sqrt();
    if norm <= 1e-12 {
        return None;
    }
    let (x, y, z) = (cam[0] / norm, cam[1] / norm, cam[2] / norm);
    let horizontal = (x * x + z * z).sqrt();
    let latitude = (-y).atan2(horizontal);
    let mut longitude = if horizontal == 0.0 { 0.0 } else { x.atan2(z) };
    if longitude >= std::f64::consts::PI {
        longitude -= 2.0 * std::f64::consts::PI;
    }
    let column = longitude * width / (2.0 * std::f64::consts::PI) + width / 2.0;
    let row = height / 2.0 - latitude * height / std::f64::consts::PI;
    Some((column, row))
}

/// Least-squares similarity `y ≈ s·Q·x + t` between corresponding point sets.
pub fn umeyama(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Option<(f64, Rotation3<f64>, Vector3<f64>)> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<Vector3<f64>>() / n as f64;
    let my = y.iter().sum::<Vector3<f64>>() / n as f64;
    let var_x = x.iter().map(|p| (p - mx).norm_squared()).sum::<f64>() / n as f64;
    if var_x <= 0.0 {
        return None;
    }
    let cov = x
        .iter()
        .zip(y)
        .fold(Matrix3::zeros(), |acc, (a, b)| acc + (b - my) * (a - mx).transpose())
        / n as f64;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let q = u * s * v_t;
    let scale = (svd.singular_values.component_mul(&s.diagonal())).sum() / var_x;
    let mut rot = Rotation3::from_matrix_unchecked(q);
    rot.renormalize();
    Some((scale, rot, my - scale * (rot * mx)))
}

fn collinear(x: &[Vector3<f64>]) -> bool {
    let m = x.iter().sum::<Vector3<f64>>() / x.len() as f64;
    let cov = x.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - m) * (p - m).transpose());
    let mut sv: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[1] <= 1e-6 * sv[0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    pub diameter: f64,
    /// `(camera, degrees)` for each aligned camera.
    pub rotation_errors_deg: Vec<(usize, f64)>,
    /// `(camera, distance / diameter)` for each aligned camera.
    pub center_errors: Vec<(usize, f64)>,
    pub point_rms: Option<f64>,
}

impl AlignmentReport {
    pub fn max_rotation_error_deg(&self) -> f64 {
        self.rotation_errors_deg.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn max_center_error(&self) -> f64 {
        self.center_errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Aligns estimated cameras (centers and axes) to the truth with a similarity transform
/// and reports per-camera and per-point errors in the truth frame.
pub fn compare_reconstruction(
    cameras: &[(usize, Pose)],
    points: &[(usize, Vector3<f64>)],
    scene: &SyntheticScene,
) -> Result<AlignmentReport, SynthError> {
    let known: Vec<&(usize, Pose)> = cameras.iter().filter(|(i, _)| *i < scene.poses.len()).collect();
    if known.len() < 3 {
        return Err(SynthError::TooFewCameras(known.len()));
    }
    let est: Vec<Vector3<f64>> = known.iter().map(|(_, p)| p.center()).collect();
    let gt: Vec<Vector3<f64>> = known.iter().map(|(i, _)| scene.poses[*i].center()).collect();
    let (scale, _, _) = umeyama(&est, &gt).ok_or(SynthError::TooFewCameras(known.len()))?;
    let diameter = scene.diameter();
    // Camera axes as extra anchors keep the rotation determined when the centers are collinear.
    let arm = 0.1 * diameter;
    let (mut est_ext, mut gt_ext) = (est.clone(), gt.clone());
    let anchors = if collinear(&gt) { known.as_slice() } else { &[] };
    for (k, (i, p)) in anchors.iter().enumerate() {
        let truth = &scene.poses[*i];
        for axis in 0..3 {
            est_ext.push(est[k] + (arm / scale) * p.rotation.matrix().row(axis).transpose());
            gt_ext.push(gt[k] + arm * truth.rotation.matrix().row(axis).transpose());
        }
    }
    let (scale, rotation, translation) = umeyama(&est_ext, &gt_ext).ok_or(SynthError::TooFewCameras(known.len()))?;
    let to_truth = |p: &Vector3<f64>| scale * (rotation * p) + translation;
    let rotation_errors_deg = known
        .iter()
        .map(|(i, p)| {
            let aligned = p.rotation * rotation.inverse();
            (*i, rotation_angle(&aligned, &scene.poses[*i].rotation).to_degrees())
        })
        .collect();
    let center_errors = known
        .iter()
        .map(|(i, p)| (*i, (to_truth(&p.center()) - scene.poses[*i].center()).norm() / diameter))
        .collect();
    let known_points: Vec<f64> = points
        .iter()
        .filter(|(i, _)| *i < scene.points.len())
        .map(|(i, p)| (to_truth(p) - scene.points[*i]).norm_squared())
        .collect();
    let point_rms = (!known_points.is_empty()).then(|| (known_points.iter().sum::<f64>() / known_points.len() as f64).sqrt());
    Ok(AlignmentReport {
        scale,
        rotation,
        translation,
        diameter,
        rotation_errors_deg,
        center_errors,
        point_rms,
    })
}

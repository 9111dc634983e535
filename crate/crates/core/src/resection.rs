//! Absolute orientation of a spherical image from 2D–3D correspondences.

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::camera::{GeomError, ImageDims, Pose, SpherePoint, EPS_DEPTH};
use crate::optim::{self, LeastSquares, LmOptions, LmReport};
use crate::two_view::{pixel_threshold_to_angle, RansacParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResectionError {
    #[error("degenerate minimal sample")]
    Degenerate,
    #[error("no pose reached consensus")]
    NoConsensus,
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// An observed bearing paired with the world point it should see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence2D3D {
    pub bearing: SpherePoint,
    pub point: Vector3<f64>,
    pub track_id: usize,
}

/// Angle between the observed bearing and `R P + T`.
pub fn angular_resection_error(pose: &Pose, corr: &Correspondence2D3D) -> Result<f64, GeomError> {
    let q = pose.transform(&corr.point);
    let n = q.norm();
    if !n.is_finite() {
        return Err(GeomError::NonFinite);
    }
    if n <= EPS_DEPTH {
        return Err(GeomError::ProjectionAtCenter);
    }
    let p = corr.bearing.as_vector();
    // Same angle as acos(p·q/|q|), without the loss of precision near zero.
    Ok(p.cross(&q).norm().atan2(p.dot(&q)))
}

fn poly_eval(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64], sb: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += sb * y;
    }
    out
}

/// Real roots of a polynomial with ascending coefficients of degree ≤ 4,
/// via companion-matrix eigenvalues and Newton polishing.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut c: Vec<f64> = coeffs.iter().map(|x| x / scale).collect();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-13 {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    let lead = c[deg];
    let mut comp = nalgebra::DMatrix::<f64>::zeros(deg, deg);
    for i in 0..deg {
        comp[(0, i)] = -c[deg - 1 - i] / lead;
        if i + 1 < deg {
            comp[(i + 1, i)] = 1.0;
        }
    }
    let deriv: Vec<f64> = (1..=deg).map(|k| k as f64 * c[k]).collect();
    let mut roots = Vec::new();
    for z in comp.complex_eigenvalues().iter() {
        if z.im.abs() > 1e-6 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        for _ in 0..8 {
            let d = poly_eval(&deriv, x);
            if d == 0.0 {
                break;
            }
            let step = poly_eval(&c, x) / d;
            x -= step;
            if step.abs() <= 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
        if x.is_finite() {
            roots.push(x);
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() < 1e-12 * a.abs().max(1.0));
    roots
}

/// Orthonormal frame spanned by a non-degenerate triangle.
fn triangle_frame(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<Matrix3<f64>> {
    let e1 = (b - a).try_normalize(1e-300)?;
    let e3 = e1.cross(&(c - a)).try_normalize(1e-300)?;
    let e2 = e3.cross(&e1);
    Some(Matrix3::from_columns(&[e1, e2, e3]))
}

/// Newton refinement of the three ray depths against the law-of-cosines system.
fn polish_depths(d: &mut Vector3<f64>, cos: &[f64; 3], sq: &[f64; 3]) {
    // cos = [cos(2,3), cos(1,3), cos(1,2)], sq = [|X2-X3|^2, |X1-X3|^2, |X1-X2|^2]
    let pairs = [(1usize, 2usize), (0, 2), (0, 1)];
    for _ in 0..6 {
        let mut f = Vector3::zeros();
        let mut jac = Matrix3::zeros();
        for (k, &(i, j)) in pairs.iter().enumerate() {
            f[k] = d[i] * d[i] + d[j] * d[j] - 2.0 * d[i] * d[j] * cos[k] - sq[k];
            jac[(k, i)] = 2.0 * d[i] - 2.0 * d[j] * cos[k];
            jac[(k, j)] = 2.0 * d[j] - 2.0 * d[i] * cos[k];
        }
        match jac.lu().solve(&f) {
            Some(step) if step.iter().all(|s| s.is_finite()) => {
                *d -= step;
                if step.norm() <= 1e-15 * d.norm() {
                    break;
                }
            }
            _ => break,
        }
    }
}

/// Every real pose consistent with three bearing/point pairs.
///
/// The ratios of the ray depths are eliminated into a quartic; each real root
/// with positive depths gives one candidate, which is verified against the
/// three samples before being returned.
pub fn p3p_solve(c: &[Correspondence2D3D; 3]) -> Result<Vec<Pose>, ResectionError> {
    let [x1, x2, x3] = [c[0].point, c[1].point, c[2].point];
    let [f1, f2, f3] = [*c[0].bearing.as_vector(), *c[1].bearing.as_vector(), *c[2].bearing.as_vector()];
    let scale = (x2 - x1).norm().max((x3 - x1).norm()).max(1e-300);
    if (x2 - x1).cross(&(x3 - x1)).norm() <= 1e-10 * scale * scale {
        return Err(ResectionError::Degenerate);
    }
    for (u, v) in [(f1, f2), (f1, f3), (f2, f3)] {
        if u.cross(&v).norm() < 1e-12 && u.dot(&v) > 0.0 {
            return Err(ResectionError::Degenerate);
        }
    }
    let a2 = (x2 - x3).norm_squared();
    let b2 = (x1 - x3).norm_squared();
    let c2 = (x1 - x2).norm_squared();
    let ca = f2.dot(&f3);
    let cb = f1.dot(&f3);
    let cg = f1.dot(&f2);

    // d2 = u d1, d3 = v d1 with u = N(v) / D(v).
    let k = [1.0, -2.0 * cb, 1.0];
    let n = poly_add(&[b2, 0.0, -b2], &k, a2 - c2);
    let d = [2.0 * b2 * cg, -2.0 * b2 * ca];
    // b^2 (D^2 + N^2 - 2 cg N D) - c^2 K D^2 = 0
    let dd = poly_mul(&d, &d);
    let nn = poly_mul(&n, &n);
    let nd = poly_mul(&n, &d);
    let inner = poly_add(&poly_add(&dd, &nn, 1.0), &nd, -2.0 * cg);
    let quartic = poly_add(
        &inner.iter().map(|x| b2 * x).collect::<Vec<_>>(),
        &poly_mul(&k, &dd),
        -c2,
    );

    let frame_world = triangle_frame(&x1, &x2, &x3).ok_or(ResectionError::Degenerate)?;
    let cos = [ca, cb, cg];
    let sq = [a2, b2, c2];
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&quartic) {
        let den = poly_eval(&d, v);
        if v <= 0.0 || den.abs() < 1e-14 * b2 {
            continue;
        }
        let u = poly_eval(&n, v) / den;
        if u <= 0.0 {
            continue;
        }
        let kv = poly_eval(&k, v);
        if kv <= 0.0 {
            continue;
        }
        let d1 = (b2 / kv).sqrt();
        let mut depths = Vector3::new(d1, u * d1, v * d1);
        polish_depths(&mut depths, &cos, &sq);
        if depths.iter().any(|x| !(*x > 0.0)) {
            continue;
        }
        let (y1, y2, y3) = (f1 * depths[0], f2 * depths[1], f3 * depths[2]);
        let frame_cam = match triangle_frame(&y1, &y2, &y3) {
            Some(f) => f,
            None => continue,
        };
        let mut rot = Rotation3::from_matrix_unchecked(frame_cam * frame_world.transpose());
        rot.renormalize();
        let centroid_w = (x1 + x2 + x3) / 3.0;
        let centroid_c = (y1 + y2 + y3) / 3.0;
        let pose = Pose::new(rot, centroid_c - rot * centroid_w);
        let consistent = c
            .iter()
            .all(|corr| angular_resection_error(&pose, corr).map(|e| e < 1e-6).unwrap_or(false));
        if !consistent {
            continue;
        }
        let duplicate = poses.iter().any(|p| {
            crate::camera::rotation_angle(&p.rotation, &pose.rotation) < 1e-9
                && (p.translation - pose.translation).norm() < 1e-9 * scale
        });
        if !duplicate {
            poses.push(pose);
        }
    }
    Ok(poses)
}

/// Orthonormal basis of the plane perpendicular to `p`.
fn tangent_basis(p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if p.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = p.cross(&helper).normalize();
    let b2 = p.cross(&b1);
    (b1, b2)
}

/// Log-map residual on the sphere: a 2-vector whose norm is exactly the angular error.
fn log_residual(bearing: &SpherePoint, q: &Vector3<f64>) -> Option<[f64; 2]> {
    let p = bearing.as_vector();
    let n = q.norm();
    if n <= EPS_DEPTH || !n.is_finite() {
        return None;
    }
    let q = q / n;
    let c = p.dot(&q);
    let t = q - c * p;
    let s = t.norm();
    let angle = s.atan2(c);
    let factor = if s > 1e-300 { angle / s } else { 1.0 };
    let (b1, b2) = tangent_basis(p);
    Some([factor * b1.dot(&t), factor * b2.dot(&t)])
}

struct PoseRefine<'a> {
    corrs: &'a [Correspondence2D3D],
}

impl LeastSquares for PoseRefine<'_> {
    type State = Pose;

    fn num_params(&self) -> usize {
        6
    }

    fn residuals(&self, pose: &Pose) -> Option<DVector<f64>> {
        let mut r = DVector::zeros(2 * self.corrs.len());
        for (k, c) in self.corrs.iter().enumerate() {
            let v = log_residual(&c.bearing, &pose.transform(&c.point))?;
            r[2 * k] = v[0];
            r[2 * k + 1] = v[1];
        }
        Some(r)
    }

    fn retract(&self, pose: &Pose, d: &DVector<f64>) -> Pose {
        let mut rot = Rotation3::new(Vector3::new(d[0], d[1], d[2])) * pose.rotation;
        rot.renormalize();
        Pose::new(rot, pose.translation + Vector3::new(d[3], d[4], d[5]))
    }
}

/// Sum of squared angular errors over `corrs`.
pub fn resection_cost(pose: &Pose, corrs: &[Correspondence2D3D]) -> Result<f64, GeomError> {
    corrs
        .iter()
        .map(|c| angular_resection_error(pose, c).map(|e| e * e))
        .sum()
}

/// Damped least-squares refinement of a pose on the given correspondences.
pub fn refine_pose(pose: &Pose, corrs: &[Correspondence2D3D], opts: &LmOptions) -> (Pose, Option<LmReport>) {
    if corrs.len() < 3 {
        return (*pose, None);
    }
    match optim::minimize(&PoseRefine { corrs }, *pose, opts) {
        Some((p, rep)) => (p, Some(rep)),
        None => (*pose, None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl PoseEstimate {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn score(pose: &Pose, corrs: &[Correspondence2D3D], threshold: f64) -> (usize, f64, Vec<bool>) {
    let mut count = 0;
    let mut total = 0.0;
    let mask = corrs
        .iter()
        .map(|c| match angular_resection_error(pose, c) {
            Ok(e) if e < threshold => {
                count += 1;
                total += e;
                true
            }
            _ => false,
        })
        .collect();
    (count, total, mask)
}

/// P3P inside RANSAC, followed by refinement on the consensus set.
pub fn estimate_pose_ransac(
    corrs: &[Correspondence2D3D],
    dims: ImageDims,
    params: &RansacParams,
) -> Result<PoseEstimate, ResectionError> {
    let n = corrs.len();
    if n < 4 {
        return Err(ResectionError::NoConsensus);
    }
    let threshold = pixel_threshold_to_angle(params.e_p, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(usize, f64, Pose, Vec<bool>)> = None;
    let mut needed = params.max_iterations;
    let mut iterations = 0;
    while iterations < needed.min(params.max_iterations) {
        iterations += 1;
        let idx = sample(&mut rng, n, 4).into_vec();
        let minimal = [corrs[idx[0]], corrs[idx[1]], corrs[idx[2]]];
        let check = &corrs[idx[3]];
        let candidates = match p3p_solve(&minimal) {
            Ok(c) => c,
            Err(_) => continue,
        };
        for pose in candidates {
            if !angular_resection_error(&pose, check).is_ok_and(|e| e < threshold) {
                continue;
            }
            let (count, total, mask) = score(&pose, corrs, threshold);
            let better = match &best {
                None => true,
                Some((bc, bt, _, _)) => count > *bc || (count == *bc && total < *bt),
            };
            if better {
                best = Some((count, total, pose, mask));
                needed = params.required_iterations(count as f64 / n as f64, 3);
            }
        }
    }
    let (count, _, mut pose, mut mask) = best.ok_or(ResectionError::NoConsensus)?;
    if count < 4 {
        return Err(ResectionError::NoConsensus);
    }
    // Refine on the consensus set, then re-classify; repeat while the set grows.
    for _ in 0..3 {
        let inl: Vec<Correspondence2D3D> = corrs.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c).collect();
        let (refined, _) = refine_pose(&pose, &inl, &LmOptions::default());
        let (rc, _, rmask) = score(&refined, corrs, threshold);
        if rc < count {
            break;
        }
        let grew = rmask != mask;
        pose = refined;
        mask = rmask;
        if !grew {
            break;
        }
    }
    Ok(PoseEstimate {
        pose,
        inliers: mask,
        iterations,
    })
}

//! Relative orientation of two spherical images.
//!
//! Correspondences are unit bearings `p1`, `p2` satisfying `p2^T E p1 = 0`
//! with `E = [T]_x R`, where `(R, T)` maps camera-a coordinates into camera b.
//! Because the cameras see the full sphere there is no image plane: cheirality
//! is the ray-direction test `p^T (R P + T) > 0`.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bundle::cost_trans_residual;
use crate::camera::{skew, ImageDims, Pose, SpherePoint};
use crate::optim::{self, LeastSquares, LmOptions};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwoViewError {
    #[error("need at least {needed} correspondences, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("correspondence lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("degenerate configuration")]
    Degenerate,
    #[error("no model reached consensus")]
    NoConsensus,
    #[error("no decomposition candidate places points in front of both cameras")]
    CheiralityFailure,
    #[error("rays are parallel")]
    NoParallax,
    #[error("triangulated point lies behind an observing ray")]
    BehindRay,
}

/// Essential matrix scaled to Frobenius norm `sqrt(2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    /// Projects an arbitrary 3×3 matrix onto the essential manifold.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, TwoViewError> {
        let svd = m.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        if svd.singular_values[order[1]] <= 1e-14 * svd.singular_values[order[0]].max(1e-300) {
            return Err(TwoViewError::Degenerate);
        }
        let mut e = Matrix3::zeros();
        for &k in &order[..2] {
            e += u.column(k) * v_t.row(k);
        }
        Ok(EssentialMatrix(e))
    }

    /// `[T]_x R` for a known relative pose.
    pub fn from_pose(rotation: &Rotation3<f64>, translation: &Vector3<f64>) -> Result<Self, TwoViewError> {
        Self::from_matrix(&(skew(translation) * rotation.matrix()))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> EssentialMatrix {
        EssentialMatrix(self.0.transpose())
    }

    /// Frobenius distance to `other` minimized over the sign ambiguity.
    pub fn distance(&self, other: &EssentialMatrix) -> f64 {
        let a = self.0 / self.0.norm();
        let b = other.0 / other.0.norm();
        (a - b).norm().min((a + b).norm())
    }
}

/// Relative pose `x_b = R x_a + T` with unit-length `T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn as_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn essential(&self) -> EssentialMatrix {
        EssentialMatrix(skew(&self.translation) * self.rotation.matrix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacParams {
    /// Inlier threshold in ERP pixels, converted to an angle per image size.
    pub e_p: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub rng_seed: u64,
    /// Classify with `max(err(E, p1, p2), err(E^T, p2, p1))` instead of the one-sided error.
    pub symmetric: bool,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            e_p: 4.0,
            max_iterations: 10_000,
            confidence: 0.9999,
            rng_seed: 0,
            symmetric: true,
        }
    }
}

impl RansacParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    /// Iteration count needed to hit `confidence` with inlier ratio `w` and sample size `k`.
    pub fn required_iterations(&self, w: f64, k: i32) -> usize {
        let fail = 1.0 - w.powi(k);
        if fail <= 0.0 {
            return 1;
        }
        if fail >= 1.0 {
            return self.max_iterations;
        }
        let n = (1.0 - self.confidence).ln() / fail.ln();
        if !n.is_finite() {
            return self.max_iterations;
        }
        (n.ceil() as usize).clamp(1, self.max_iterations)
    }
}

/// Converts a pixel threshold to the equivalent spherical angle, `2 pi e_p / max(W, H)`.
pub fn pixel_threshold_to_angle(e_p: f64, dims: ImageDims) -> f64 {
    TAU * e_p / dims.max_side()
}

fn check_lengths(p1: &[SpherePoint], p2: &[SpherePoint], needed: usize) -> Result<(), TwoViewError> {
    if p1.len() != p2.len() {
        return Err(TwoViewError::LengthMismatch(p1.len(), p2.len()));
    }
    if p1.len() < needed {
        return Err(TwoViewError::TooFew {
            needed,
            got: p1.len(),
        });
    }
    Ok(())
}

/// Linear eight-point solve of `p2^T E p1 = 0` followed by projection onto
/// the essential manifold.
pub fn essential_8point(p1: &[SpherePoint], p2: &[SpherePoint]) -> Result<EssentialMatrix, TwoViewError> {
    check_lengths(p1, p2, 8)?;
    // Pad to at least 9 rows so the SVD yields the full right null space.
    let rows = p1.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (k, (a1, a2)) in p1.iter().zip(p2).enumerate() {
        let (u, v) = (a1.as_vector(), a2.as_vector());
        for i in 0..3 {
            for j in 0..3 {
                a[(k, 3 * i + j)] = v[i] * u[j];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(TwoViewError::Degenerate)?;
    let s = &svd.singular_values;
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&x, &y| s[y].total_cmp(&s[x]));
    // Rank 8 is required for a unique null vector.
    let largest = s[idx[0]];
    if idx.len() < 9 || s[idx[7]] <= 1e-10 * largest {
        return Err(TwoViewError::Degenerate);
    }
    let null: Vec<f64> = v_t.row(idx[8]).iter().copied().collect();
    let e = Matrix3::from_row_slice(&null);
    EssentialMatrix::from_matrix(&e)
}

/// One-sided vector-to-plane geodesic error: the angle between `p2` and the
/// epipolar plane with normal `E p1`.
pub fn angular_epipolar_error(e: &EssentialMatrix, p1: &SpherePoint, p2: &SpherePoint) -> f64 {
    let n = e.0 * p1.as_vector();
    let norm = n.norm();
    if norm < 1e-15 {
        return FRAC_PI_2;
    }
    (p2.as_vector().dot(&n) / norm).clamp(-1.0, 1.0).asin().abs()
}

/// `max` of the error measured in both images.
pub fn symmetric_angular_error(e: &EssentialMatrix, p1: &SpherePoint, p2: &SpherePoint) -> f64 {
    let fwd = angular_epipolar_error(e, p1, p2);
    let bwd = angular_epipolar_error(&e.transpose(), p2, p1);
    fwd.max(bwd)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EssentialEstimate {
    pub essential: EssentialMatrix,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl EssentialEstimate {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn score(
    e: &EssentialMatrix,
    p1: &[SpherePoint],
    p2: &[SpherePoint],
    threshold: f64,
    symmetric: bool,
) -> (usize, f64, Vec<bool>) {
    let mut count = 0;
    let mut total = 0.0;
    let mask = p1
        .iter()
        .zip(p2)
        .map(|(a, b)| {
            let err = if symmetric {
                symmetric_angular_error(e, a, b)
            } else {
                angular_epipolar_error(e, a, b)
            };
            let inlier = err < threshold;
            if inlier {
                count += 1;
                total += err;
            }
            inlier
        })
        .collect();
    (count, total, mask)
}

fn select<T: Copy>(values: &[T], mask: &[bool]) -> Vec<T> {
    values.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect()
}

/// Hypothesize-and-verify essential matrix estimation with the angular error.
///
/// Deterministic for a fixed `params.rng_seed`.
pub fn estimate_essential_ransac(
    p1: &[SpherePoint],
    p2: &[SpherePoint],
    dims: ImageDims,
    params: &RansacParams,
) -> Result<EssentialEstimate, TwoViewError> {
    if p1.len() != p2.len() {
        return Err(TwoViewError::LengthMismatch(p1.len(), p2.len()));
    }
    let n = p1.len();
    if n < 8 {
        return Err(TwoViewError::NoConsensus);
    }
    let threshold = pixel_threshold_to_angle(params.e_p, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut best: Option<(usize, f64, EssentialMatrix, Vec<bool>)> = None;
    let mut needed = params.max_iterations;
    let mut iterations = 0;
    let mut s1 = Vec::with_capacity(8);
    let mut s2 = Vec::with_capacity(8);

    while iterations < needed.min(params.max_iterations) {
        iterations += 1;
        s1.clear();
        s2.clear();
        for i in sample(&mut rng, n, 8).iter() {
            s1.push(p1[i]);
            s2.push(p2[i]);
        }
        let e = match essential_8point(&s1, &s2) {
            Ok(e) => e,
            Err(_) => continue,
        };
        let (count, total, mask) = score(&e, p1, p2, threshold, params.symmetric);
        let better = match &best {
            None => true,
            Some((bc, bt, _, _)) => count > *bc || (count == *bc && total < *bt),
        };
        if better {
            best = Some((count, total, e, mask));
            needed = params.required_iterations(count as f64 / n as f64, 8);
        }
    }

    let (count, total, mut e, mut mask) = best.ok_or(TwoViewError::NoConsensus)?;
    if count < 8 {
        return Err(TwoViewError::NoConsensus);
    }
    // Re-fit on the consensus set; keep the refit if it does not lose support.
    let (mut count, mut total) = (count, total);
    for _ in 0..3 {
        let refit = match essential_8point(&select(p1, &mask), &select(p2, &mask)) {
            Ok(r) => r,
            Err(_) => break,
        };
        let (rc, rt, rmask) = score(&refit, p1, p2, threshold, params.symmetric);
        if rc > count || (rc == count && rt < total) {
            let changed = rmask != mask;
            e = refit;
            mask = rmask;
            count = rc;
            total = rt;
            if !changed {
                break;
            }
        } else {
            break;
        }
    }
    Ok(EssentialEstimate {
        essential: e,
        inliers: mask,
        iterations,
    })
}

/// The four `(R, T)` factorizations of `E`, in a fixed order:
/// `(R1, t), (R1, -t), (R2, t), (R2, -t)`.
pub fn essential_candidates(e: &EssentialMatrix) -> [RelativePose; 4] {
    let svd = e.0.svd(true, true);
    let (mut u, mut v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Sort singular triplets descending so the null direction is last.
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u_sorted = Matrix3::from_columns(&[u.column(order[0]), u.column(order[1]), u.column(order[2])]);
    let v_sorted = Matrix3::from_rows(&[v_t.row(order[0]), v_t.row(order[1]), v_t.row(order[2])]);
    u = u_sorted;
    v_t = v_sorted;
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let mut r1 = Rotation3::from_matrix_unchecked(u * w * v_t);
    let mut r2 = Rotation3::from_matrix_unchecked(u * w.transpose() * v_t);
    r1.renormalize();
    r2.renormalize();
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    [
        RelativePose { rotation: r1, translation: t },
        RelativePose { rotation: r1, translation: -t },
        RelativePose { rotation: r2, translation: t },
        RelativePose { rotation: r2, translation: -t },
    ]
}

/// Counts correspondences that triangulate in front of both rays for `rel`.
pub fn cheirality_count(rel: &RelativePose, p1: &[SpherePoint], p2: &[SpherePoint]) -> usize {
    let a = Pose::identity();
    let b = rel.as_pose();
    p1.iter()
        .zip(p2)
        .filter(|(x1, x2)| {
            let pt = match solve_rays(&[(a, **x1), (b, **x2)]) {
                Some(p) => p,
                None => return false,
            };
            x1.as_vector().dot(&pt) > 0.0 && x2.as_vector().dot(&b.transform(&pt)) > 0.0
        })
        .count()
}

/// Picks the factorization of `E` that puts the most inliers in front of both cameras.
pub fn decompose_essential(
    e: &EssentialMatrix,
    p1: &[SpherePoint],
    p2: &[SpherePoint],
    inliers: &[bool],
) -> Result<RelativePose, TwoViewError> {
    if p1.len() != p2.len() || p1.len() != inliers.len() {
        return Err(TwoViewError::LengthMismatch(p1.len(), p2.len()));
    }
    let q1 = select(p1, inliers);
    let q2 = select(p2, inliers);
    if q1.is_empty() {
        return Err(TwoViewError::TooFew { needed: 1, got: 0 });
    }
    let mut best = (0usize, None);
    for cand in essential_candidates(e) {
        let count = cheirality_count(&cand, &q1, &q2);
        if count > best.0 {
            best = (count, Some(cand));
        }
    }
    best.1.ok_or(TwoViewError::CheiralityFailure)
}

/// Least-squares intersection of rays: minimizes `sum |[p]_x (R P + T)|^2`.
fn solve_rays(views: &[(Pose, SpherePoint)]) -> Option<Vector3<f64>> {
    let mut a = DMatrix::<f64>::zeros(3 * views.len(), 3);
    let mut b = DVector::<f64>::zeros(3 * views.len());
    for (k, (pose, p)) in views.iter().enumerate() {
        let s = skew(p.as_vector());
        let sr = s * pose.rotation.matrix();
        let st = -(s * pose.translation);
        a.view_mut((3 * k, 0), (3, 3)).copy_from(&sr);
        b.rows_mut(3 * k, 3).copy_from(&st);
    }
    let ata: Matrix3<f64> = (a.transpose() * &a).fixed_view::<3, 3>(0, 0).into_owned();
    let atb: Vector3<f64> = (a.transpose() * &b).fixed_rows::<3>(0).into_owned();
    let eig = ata.symmetric_eigenvalues();
    let max = eig.amax();
    if max <= 0.0 || eig.min() <= 1e-14 * max {
        return None;
    }
    let lu = ata.lu();
    let mut pt = lu.solve(&atb)?;
    // One round of iterative refinement on the normal equations.
    let corr = lu.solve(&(atb - ata * pt))?;
    pt += corr;
    pt.iter().all(|v| v.is_finite()).then_some(pt)
}

/// Angle subtended at `point` by the two camera centers.
pub fn parallax_angle(point: &Vector3<f64>, center_a: &Vector3<f64>, center_b: &Vector3<f64>) -> f64 {
    let da = point - center_a;
    let db = point - center_b;
    da.cross(&db).norm().atan2(da.dot(&db))
}

/// Largest pairwise parallax among all observing camera centers.
pub fn max_parallax_angle(point: &Vector3<f64>, centers: &[Vector3<f64>]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.max(parallax_angle(point, &centers[i], &centers[j]));
        }
    }
    best
}

pub const MIN_PARALLAX: f64 = 1e-6;

/// Two-ray linear triangulation. Returns the point and the parallax angle at it.
pub fn triangulate(
    pose_a: &Pose,
    pose_b: &Pose,
    p_a: &SpherePoint,
    p_b: &SpherePoint,
) -> Result<(Vector3<f64>, f64), TwoViewError> {
    triangulate_multi(&[(*pose_a, *p_a), (*pose_b, *p_b)])
}

/// Linear triangulation from any number of views, with the largest pairwise
/// parallax angle and a cheirality check in every view.
pub fn triangulate_multi(views: &[(Pose, SpherePoint)]) -> Result<(Vector3<f64>, f64), TwoViewError> {
    if views.len() < 2 {
        return Err(TwoViewError::TooFew {
            needed: 2,
            got: views.len(),
        });
    }
    let centers: Vec<Vector3<f64>> = views.iter().map(|(p, _)| p.center()).collect();
    // World-frame ray directions: reject bundles with no angular spread.
    let dirs: Vec<Vector3<f64>> = views
        .iter()
        .map(|(pose, p)| pose.rotation.inverse() * p.as_vector())
        .collect();
    let mut spread = 0.0f64;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            spread = spread.max(dirs[i].cross(&dirs[j]).norm());
        }
    }
    if spread < MIN_PARALLAX {
        return Err(TwoViewError::NoParallax);
    }
    let pt = solve_rays(views).ok_or(TwoViewError::NoParallax)?;
    let angle = max_parallax_angle(&pt, &centers);
    if angle < MIN_PARALLAX {
        return Err(TwoViewError::NoParallax);
    }
    for (pose, p) in views {
        if p.as_vector().dot(&pose.transform(&pt)) <= 0.0 {
            return Err(TwoViewError::BehindRay);
        }
    }
    Ok((pt, angle))
}

/// Refines a relative pose by minimizing the transformation cost over the
/// given correspondences (rotation on SO(3), translation on the unit sphere).
pub fn refine_relative_pose(
    rel: &RelativePose,
    p1: &[SpherePoint],
    p2: &[SpherePoint],
    opts: &LmOptions,
) -> (RelativePose, optim::LmReport) {
    let problem = RelativeRefine { p1, p2 };
    match optim::minimize(&problem, *rel, opts) {
        Some(out) => out,
        None => (
            *rel,
            optim::LmReport {
                initial_cost: f64::NAN,
                final_cost: f64::NAN,
                iterations: 0,
                converged: false,
            },
        ),
    }
}

struct RelativeRefine<'a> {
    p1: &'a [SpherePoint],
    p2: &'a [SpherePoint],
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&helper).normalize();
    let b2 = t.cross(&b1);
    (b1, b2)
}

impl LeastSquares for RelativeRefine<'_> {
    type State = RelativePose;

    fn num_params(&self) -> usize {
        5
    }

    fn residuals(&self, s: &RelativePose) -> Option<DVector<f64>> {
        let e = s.essential();
        let mut r = DVector::zeros(self.p1.len());
        for (k, (a, b)) in self.p1.iter().zip(self.p2).enumerate() {
            r[k] = cost_trans_residual(&e.0, a, b)?;
        }
        Some(r)
    }

    fn retract(&self, s: &RelativePose, d: &DVector<f64>) -> RelativePose {
        let rotation = Rotation3::new(Vector3::new(d[0], d[1], d[2])) * s.rotation;
        let (b1, b2) = tangent_basis(&s.translation);
        let translation = (s.translation + d[3] * b1 + d[4] * b2).normalize();
        RelativePose { rotation, translation }
    }
}

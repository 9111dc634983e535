//! Spherical reprojection costs and the bundle adjuster.
//!
//! The objective is the plain sum of squared ERP pixel residuals over all
//! observations. Cameras are updated with left-multiplied angle-axis
//! increments, `R <- exp([w]_x) R`, and the linear system is reduced onto the
//! camera block with a Schur complement over the 3×3 point blocks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Rotation3, SMatrix, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{project_to_pixel, skew, GeomError, ImageDims, Intrinsics, PixelCoord, Pose, SpherePoint};
use crate::optim::Damping;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("transformation cost undefined: zero denominator with nonzero residual")]
    ZeroDenominator,
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("initial cost is not finite")]
    NonFiniteCost,
}

/// Signed square root of [`cost_trans`]; `None` when the cost is undefined.
pub fn cost_trans_residual(e: &Matrix3<f64>, p1: &SpherePoint, p2: &SpherePoint) -> Option<f64> {
    let a = p1.as_vector();
    let b = p2.as_vector();
    let num = b.dot(&(e * a));
    let den = (e * a).norm_squared() + (e.transpose() * b).norm_squared();
    if den == 0.0 {
        return (num == 0.0).then_some(0.0);
    }
    Some(num / den.sqrt())
}

/// Sampson-style transformation error `(p2^T E p1)^2 / (|E p1|^2 + |E^T p2|^2)`.
pub fn cost_trans(e: &Matrix3<f64>, p1: &SpherePoint, p2: &SpherePoint) -> Result<f64, BundleError> {
    cost_trans_residual(e, p1, p2)
        .map(|r| r * r)
        .ok_or(BundleError::ZeroDenominator)
}

/// Wraps a horizontal pixel difference into `(-W/2, W/2]`.
pub fn wrap_horizontal(dx: f64, width: f64) -> f64 {
    let mut d = dx.rem_euclid(width);
    if d > width / 2.0 {
        d -= width;
    }
    d
}

/// Reprojection residual `projected - observed` in pixels, seam-corrected.
pub fn cost_rprj(pose: &Pose, point: &Vector3<f64>, observed: PixelCoord, dims: ImageDims) -> Result<Vector2<f64>, GeomError> {
    let proj = project_to_pixel(point, pose, &Intrinsics::new(dims))?;
    Ok(Vector2::new(
        wrap_horizontal(proj.ix - observed.ix, dims.w()),
        proj.iy - observed.iy,
    ))
}

/// Projected pixel together with its derivatives w.r.t. the camera increment
/// `(w, dT)` and the world point.
pub fn reprojection_jacobian(
    pose: &Pose,
    point: &Vector3<f64>,
    dims: ImageDims,
) -> Result<(PixelCoord, SMatrix<f64, 2, 6>, Matrix2x3<f64>), GeomError> {
    let proj = project_to_pixel(point, pose, &Intrinsics::new(dims))?;
    let rp = pose.rotation * point;
    let pc = rp + pose.translation;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let rho2 = x * x + z * z;
    let rho = rho2.sqrt();
    let n2 = rho2 + y * y;
    if rho < 1e-300 {
        return Err(GeomError::NonFinite);
    }
    let kx = dims.w() / std::f64::consts::TAU;
    let ky = dims.h() / std::f64::consts::PI;
    let d_pix = Matrix2x3::new(
        kx * z / rho2,
        0.0,
        -kx * x / rho2,
        -ky * x * y / (rho * n2),
        ky * rho / n2,
        -ky * z * y / (rho * n2),
    );
    let d_rot = -skew(&rp);
    let mut jc = SMatrix::<f64, 2, 6>::zeros();
    jc.fixed_view_mut::<2, 3>(0, 0).copy_from(&(d_pix * d_rot));
    jc.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_pix);
    let jp = d_pix * pose.rotation.matrix();
    Ok((proj, jc, jp))
}

/// Which parameters of a camera the solver may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraFixing {
    Free,
    Fixed,
    /// Rotation and two translation components free; component `k` of `T` held.
    TranslationAxis(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaCamera {
    pub pose: Pose,
    pub fixing: CameraFixing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaPoint {
    pub position: Vector3<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaObservation {
    pub camera: usize,
    pub point: usize,
    pub pixel: PixelCoord,
    pub dims: ImageDims,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RobustLoss {
    #[default]
    Squared,
    /// `c^2 ln(1 + s / c^2)` with `s` the squared residual norm.
    Cauchy { scale: f64 },
}

impl RobustLoss {
    fn rho(&self, s: f64) -> f64 {
        match *self {
            RobustLoss::Squared => s,
            RobustLoss::Cauchy { scale } => {
                let c2 = scale * scale;
                c2 * (s / c2).ln_1p()
            }
        }
    }

    fn weight(&self, s: f64) -> f64 {
        match *self {
            RobustLoss::Squared => 1.0,
            RobustLoss::Cauchy { scale } => 1.0 / (1.0 + s / (scale * scale)),
        }
    }
}

/// Latitude above which the horizontal residual is scaled by `cos(phi)`.
pub const POLE_LATITUDE: f64 = 89.9 * std::f64::consts::PI / 180.0;

#[derive(Debug, Clone, PartialEq)]
pub struct BaProblem {
    pub cameras: Vec<BaCamera>,
    pub points: Vec<BaPoint>,
    pub observations: Vec<BaObservation>,
    pub loss: RobustLoss,
    pub pole_weighting: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaOptions {
    pub max_iterations: usize,
    pub function_tolerance: f64,
}

impl Default for BaOptions {
    fn default() -> Self {
        BaOptions {
            max_iterations: 100,
            function_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Mean Euclidean pixel residual over all observations at the final state.
    pub mean_reprojection_error: f64,
    /// Costs after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

// Cost below which a problem is treated as already solved (squared pixels per observation).
const NEGLIGIBLE_COST: f64 = 1e-24;

struct Linearization {
    residual: Vector2<f64>,
    jc: SMatrix<f64, 2, 6>,
    jp: Matrix2x3<f64>,
}

impl BaProblem {
    pub fn new(cameras: Vec<BaCamera>, points: Vec<BaPoint>, observations: Vec<BaObservation>) -> Self {
        BaProblem {
            cameras,
            points,
            observations,
            loss: RobustLoss::Squared,
            pole_weighting: true,
        }
    }

    pub fn validate(&self) -> Result<(), BundleError> {
        let mut cam_obs = vec![0usize; self.cameras.len()];
        let mut pt_obs = vec![0usize; self.points.len()];
        for (k, o) in self.observations.iter().enumerate() {
            if o.camera >= self.cameras.len() || o.point >= self.points.len() {
                return Err(BundleError::InvalidProblem(format!("observation {k} has out-of-range index")));
            }
            cam_obs[o.camera] += 1;
            pt_obs[o.point] += 1;
        }
        for (j, c) in self.cameras.iter().enumerate() {
            if c.fixing != CameraFixing::Fixed && cam_obs[j] == 0 {
                return Err(BundleError::InvalidProblem(format!("free camera {j} has no observations")));
            }
            if let CameraFixing::TranslationAxis(k) = c.fixing {
                if k > 2 {
                    return Err(BundleError::InvalidProblem(format!("camera {j} fixes axis {k}")));
                }
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.fixed && pt_obs[i] < 2 {
                return Err(BundleError::InvalidProblem(format!("free point {i} has {} observations", pt_obs[i])));
            }
        }
        Ok(())
    }

    fn horizontal_weight(&self, o: &BaObservation) -> f64 {
        if !self.pole_weighting {
            return 1.0;
        }
        let phi = (o.dims.h() / 2.0 - o.pixel.iy) * std::f64::consts::PI / o.dims.h();
        if phi.abs() > POLE_LATITUDE {
            phi.cos().max(0.0)
        } else {
            1.0
        }
    }

    /// Per-observation residuals as seen by the objective (pole weighting applied).
    fn weighted_residual(&self, o: &BaObservation) -> Result<Vector2<f64>, GeomError> {
        let cam = &self.cameras[o.camera];
        let pt = &self.points[o.point];
        let mut r = cost_rprj(&cam.pose, &pt.position, o.pixel, o.dims)?;
        r.x *= self.horizontal_weight(o);
        Ok(r)
    }

    /// The objective: `sum rho(|r_ij|^2)` over the observation list.
    pub fn cost(&self) -> Result<f64, GeomError> {
        let terms: Result<Vec<f64>, GeomError> = self
            .observations
            .par_iter()
            .map(|o| self.weighted_residual(o).map(|r| self.loss.rho(r.norm_squared())))
            .collect();
        Ok(terms?.iter().sum())
    }

    /// Mean unweighted pixel residual norm.
    pub fn mean_reprojection_error(&self) -> Result<f64, GeomError> {
        if self.observations.is_empty() {
            return Ok(0.0);
        }
        let norms: Result<Vec<f64>, GeomError> = self
            .observations
            .par_iter()
            .map(|o| {
                let cam = &self.cameras[o.camera];
                cost_rprj(&cam.pose, &self.points[o.point].position, o.pixel, o.dims).map(|r| r.norm())
            })
            .collect();
        Ok(norms?.iter().sum::<f64>() / self.observations.len() as f64)
    }

    fn linearize(&self) -> Result<Vec<Linearization>, GeomError> {
        self.observations
            .par_iter()
            .map(|o| {
                let cam = &self.cameras[o.camera];
                let pt = &self.points[o.point];
                let (proj, mut jc, mut jp) = reprojection_jacobian(&cam.pose, &pt.position, o.dims)?;
                let mut residual = Vector2::new(
                    wrap_horizontal(proj.ix - o.pixel.ix, o.dims.w()),
                    proj.iy - o.pixel.iy,
                );
                let hw = self.horizontal_weight(o);
                residual.x *= hw;
                jc.row_mut(0).scale_mut(hw);
                jp.row_mut(0).scale_mut(hw);
                let w = self.loss.weight(residual.norm_squared()).sqrt();
                Ok(Linearization {
                    residual: residual * w,
                    jc: jc * w,
                    jp: jp * w,
                })
            })
            .collect()
    }
}

/// Refines the free cameras and points of `problem` in place.
pub fn solve(problem: &mut BaProblem, opts: &BaOptions) -> Result<BaReport, BundleError> {
    problem.validate()?;
    let initial_cost = problem.cost()?;
    if !initial_cost.is_finite() {
        return Err(BundleError::NonFiniteCost);
    }

    // Free-parameter layout.
    let mut cam_slot = vec![usize::MAX; problem.cameras.len()];
    let mut n_cam = 0;
    for (j, c) in problem.cameras.iter().enumerate() {
        if c.fixing != CameraFixing::Fixed {
            cam_slot[j] = n_cam;
            n_cam += 1;
        }
    }
    let mut pt_slot = vec![usize::MAX; problem.points.len()];
    let mut n_pt = 0;
    for (i, p) in problem.points.iter().enumerate() {
        if !p.fixed {
            pt_slot[i] = n_pt;
            n_pt += 1;
        }
    }

    let mut cost = initial_cost;
    let mut history = vec![cost];
    let mut damping = Damping::new();
    let mut iterations = 0;
    let mut converged = false;
    let negligible = NEGLIGIBLE_COST * problem.observations.len().max(1) as f64;

    while iterations < opts.max_iterations {
        if cost <= negligible || (n_cam == 0 && n_pt == 0) {
            converged = true;
            break;
        }
        iterations += 1;
        let lin = problem.linearize()?;

        // Accumulate the normal equations.
        let mut u = DMatrix::<f64>::zeros(6 * n_cam, 6 * n_cam);
        let mut gc = DVector::<f64>::zeros(6 * n_cam);
        let mut v = vec![Matrix3::<f64>::zeros(); n_pt];
        let mut gp = vec![Vector3::<f64>::zeros(); n_pt];
        let mut w: BTreeMap<(usize, usize), SMatrix<f64, 6, 3>> = BTreeMap::new();
        for (o, l) in problem.observations.iter().zip(&lin) {
            let cs = cam_slot[o.camera];
            let ps = pt_slot[o.point];
            if cs != usize::MAX {
                let mut jc = l.jc;
                if let CameraFixing::TranslationAxis(k) = problem.cameras[o.camera].fixing {
                    jc.column_mut(3 + k).fill(0.0);
                }
                let mut block = u.view_mut((6 * cs, 6 * cs), (6, 6));
                block += jc.transpose() * jc;
                let mut g = gc.rows_mut(6 * cs, 6);
                g += jc.transpose() * l.residual;
                if ps != usize::MAX {
                    *w.entry((ps, cs)).or_insert_with(SMatrix::zeros) += jc.transpose() * l.jp;
                }
            }
            if ps != usize::MAX {
                v[ps] += l.jp.transpose() * l.jp;
                gp[ps] += l.jp.transpose() * l.residual;
            }
        }
        // Held translation components get an identity row so their step is zero.
        for (j, c) in problem.cameras.iter().enumerate() {
            if let CameraFixing::TranslationAxis(k) = c.fixing {
                let idx = 6 * cam_slot[j] + 3 + k;
                u[(idx, idx)] = 1.0;
                gc[idx] = 0.0;
            }
        }

        let mut accepted = false;
        while !damping.exhausted() {
            let step = match damped_step(&u, &gc, &v, &gp, &w, n_cam, &damping) {
                Some(s) => s,
                None => {
                    damping.reject();
                    continue;
                }
            };
            let mut candidate = problem.clone();
            apply_step(&mut candidate, &step, &cam_slot, &pt_slot, n_cam);
            match candidate.cost() {
                Ok(c) if c.is_finite() && c < cost => {
                    let rel = (cost - c) / cost;
                    *problem = candidate;
                    cost = c;
                    history.push(c);
                    damping.accept();
                    accepted = true;
                    if rel < opts.function_tolerance {
                        converged = true;
                    }
                    break;
                }
                _ => damping.reject(),
            }
        }
        if !accepted {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Ok(BaReport {
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
        mean_reprojection_error: problem.mean_reprojection_error()?,
        cost_history: history,
    })
}

fn damped_step(
    u: &DMatrix<f64>,
    gc: &DVector<f64>,
    v: &[Matrix3<f64>],
    gp: &[Vector3<f64>],
    w: &BTreeMap<(usize, usize), SMatrix<f64, 6, 3>>,
    n_cam: usize,
    damping: &Damping,
) -> Option<(DVector<f64>, Vec<Vector3<f64>>)> {
    let mut s = u.clone();
    damping.apply(&mut s);
    let mut rhs = -gc.clone();

    // Damped, inverted point blocks.
    let mut v_inv = Vec::with_capacity(v.len());
    for vi in v {
        let mut d = DMatrix::from_column_slice(3, 3, vi.as_slice());
        damping.apply(&mut d);
        let inv = Matrix3::from_column_slice(d.as_slice()).try_inverse()?;
        v_inv.push(inv);
    }

    // Group W blocks by point.
    let mut per_point: Vec<Vec<(usize, SMatrix<f64, 6, 3>)>> = vec![Vec::new(); v.len()];
    for (&(p, c), blk) in w {
        per_point[p].push((c, *blk));
    }
    for (p, blocks) in per_point.iter().enumerate() {
        let vinv = &v_inv[p];
        for (c1, w1) in blocks {
            let w1v = w1 * vinv;
            let mut r = rhs.rows_mut(6 * c1, 6);
            r += w1v * gp[p];
            for (c2, w2) in blocks {
                let mut blk = s.view_mut((6 * c1, 6 * c2), (6, 6));
                blk -= w1v * w2.transpose();
            }
        }
    }

    let dc = if n_cam > 0 {
        s.cholesky()?.solve(&rhs)
    } else {
        DVector::zeros(0)
    };
    let mut dp = Vec::with_capacity(v.len());
    for (p, blocks) in per_point.iter().enumerate() {
        let mut b = -gp[p];
        for (c, wb) in blocks {
            let dcc = dc.fixed_rows::<6>(6 * c);
            b -= wb.transpose() * dcc;
        }
        dp.push(v_inv[p] * b);
    }
    if dc.iter().any(|x| !x.is_finite()) || dp.iter().any(|x| x.iter().any(|y| !y.is_finite())) {
        return None;
    }
    Some((dc, dp))
}

fn apply_step(
    problem: &mut BaProblem,
    step: &(DVector<f64>, Vec<Vector3<f64>>),
    cam_slot: &[usize],
    pt_slot: &[usize],
    n_cam: usize,
) {
    let (dc, dp) = step;
    debug_assert_eq!(dc.len(), 6 * n_cam);
    for (j, cam) in problem.cameras.iter_mut().enumerate() {
        let s = cam_slot[j];
        if s == usize::MAX {
            continue;
        }
        let d = dc.fixed_rows::<6>(6 * s);
        let omega = Vector3::new(d[0], d[1], d[2]);
        let mut dt = Vector3::new(d[3], d[4], d[5]);
        if let CameraFixing::TranslationAxis(k) = cam.fixing {
            dt[k] = 0.0;
        }
        let mut rot = Rotation3::new(omega) * cam.pose.rotation;
        rot.renormalize();
        cam.pose = Pose::new(rot, cam.pose.translation + dt);
    }
    for (i, pt) in problem.points.iter_mut().enumerate() {
        let s = pt_slot[i];
        if s != usize::MAX {
            pt.position += dp[s];
        }
    }
}

/// Gauge for a free-floating reconstruction: camera `first` fully fixed and
/// the dominant translation component of camera `second` held, which pins scale.
pub fn fix_gauge(problem: &mut BaProblem, first: usize, second: usize) {
    problem.cameras[first].fixing = CameraFixing::Fixed;
    let first_pose = problem.cameras[first].pose;
    let rel = problem.cameras[second].pose.compose(&first_pose.inverse());
    let t = problem.cameras[second].pose.translation;
    // Choose the axis from the baseline in the second camera frame; use the raw translation as a tie-break.
    let basis = if rel.translation.norm() > 0.0 { rel.translation } else { t };
    let k = basis.iamax();
    problem.cameras[second].fixing = CameraFixing::TranslationAxis(k);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::world_to_sphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ImageDims {
        ImageDims::new(2000, 1000).unwrap()
    }

    #[test]
    fn cost_trans_cases() {
        let t = Vector3::new(1.0, 0.0, 0.0);
        let e = skew(&t);
        let p = SpherePoint::new(0.0, 0.2, 1.0).unwrap();
        let q = SpherePoint::new(0.3, 0.2, 1.0).unwrap();
        assert_eq!(cost_trans(&e, &p, &q).unwrap(), 0.0);
        let r = SpherePoint::new(0.3, 0.5, 1.0).unwrap();
        let c = cost_trans(&e, &p, &r).unwrap();
        assert!((cost_trans(&(e * 7.5), &p, &r).unwrap() - c).abs() < 1e-15);
        // Independent recomputation.
        let (a, b) = (p.as_vector(), r.as_vector());
        let num = (b.transpose() * e * a)[0];
        let den = (e * a).norm_squared() + (e.transpose() * b).norm_squared();
        assert!((c - num * num / den).abs() < 1e-12);
        // Both terms vanish together, so a zero denominator implies a zero numerator.
        assert_eq!(cost_trans(&Matrix3::zeros(), &p, &r), Ok(0.0));
    }

    #[test]
    fn rprj_sign_and_seam() {
        let d = dims();
        let pose = Pose::identity();
        let x = Vector3::new(0.0, 0.0, 5.0);
        let proj = project_to_pixel(&x, &pose, &Intrinsics::new(d)).unwrap();
        assert_eq!(cost_rprj(&pose, &x, proj, d).unwrap(), Vector2::zeros());
        let right = PixelCoord::new(proj.ix + 1.0, proj.iy);
        assert_eq!(cost_rprj(&pose, &x, right, d).unwrap(), Vector2::new(-1.0, 0.0));
        // Point projecting to column 0.5; observed at W - 0.5.
        let theta = (0.5 - 1000.0) * std::f64::consts::TAU / 2000.0;
        let x = Vector3::new(theta.sin(), 0.0, theta.cos()) * 3.0;
        let r = cost_rprj(&pose, &x, PixelCoord::new(1999.5, 500.0), d).unwrap();
        assert!((r.x - 1.0).abs() < 1e-9, "{r}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = dims();
        for _ in 0..200 {
            let pose = Pose::new(
                Rotation3::new(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )),
                Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            );
            let x = Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
            let sp = match world_to_sphere(&x, &pose) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let g = sp.to_geo();
            if g.phi.abs() > 1.3 || g.theta.abs() > 3.0 {
                continue;
            }
            let (_, jc, jp) = reprojection_jacobian(&pose, &x, d).unwrap();
            let f = |p: &Pose, pt: &Vector3<f64>| {
                let px = project_to_pixel(pt, p, &Intrinsics::new(d)).unwrap();
                Vector2::new(px.ix, px.iy)
            };
            let h = 1e-6;
            for k in 0..6 {
                let mut dv = [0.0; 6];
                dv[k] = h;
                let plus = perturb(&pose, &dv);
                dv[k] = -h;
                let minus = perturb(&pose, &dv);
                let num = (f(&plus, &x) - f(&minus, &x)) / (2.0 * h);
                let ana = jc.column(k);
                assert!((num - ana).norm() <= 1e-4 * ana.norm().max(1.0), "cam col {k}: {num} vs {ana}");
            }
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let num = (f(&pose, &(x + e)) - f(&pose, &(x - e))) / (2.0 * h);
                let ana = jp.column(k);
                assert!((num - ana).norm() <= 1e-4 * ana.norm().max(1.0));
            }
        }
    }

    fn perturb(pose: &Pose, d: &[f64; 6]) -> Pose {
        Pose::new(
            Rotation3::new(Vector3::new(d[0], d[1], d[2])) * pose.rotation,
            pose.translation + Vector3::new(d[3], d[4], d[5]),
        )
    }

    fn small_problem(seed: u64, noise_deg: f64) -> (BaProblem, Vec<Pose>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims();
        let truth: Vec<Pose> = (0..4)
            .map(|j| {
                let a = j as f64 * 0.8;
                Pose::from_center(
                    Rotation3::new(Vector3::new(0.0, a, 0.0)),
                    &Vector3::new(3.0 * a.cos(), 0.2 * j as f64, 3.0 * a.sin()),
                )
            })
            .collect();
        let points: Vec<Vector3<f64>> = (0..60)
            .map(|_| Vector3::new(rng.random_range(-8.0..8.0), rng.random_range(-3.0..3.0), rng.random_range(-8.0..8.0)))
            .collect();
        let mut obs = Vec::new();
        for (j, pose) in truth.iter().enumerate() {
            for (i, x) in points.iter().enumerate() {
                let px = project_to_pixel(x, pose, &Intrinsics::new(d)).unwrap();
                obs.push(BaObservation { camera: j, point: i, pixel: px, dims: d });
            }
        }
        let cams = truth
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let pose = if j == 0 || noise_deg == 0.0 {
                    *p
                } else {
                    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
                    Pose::from_center(Rotation3::new(axis * noise_deg.to_radians()) * p.rotation, &p.center())
                };
                BaCamera { pose, fixing: CameraFixing::Free }
            })
            .collect();
        let pts = points.iter().map(|x| BaPoint { position: *x, fixed: false }).collect();
        let mut problem = BaProblem::new(cams, pts, obs);
        fix_gauge(&mut problem, 0, 1);
        (problem, truth)
    }

    #[test]
    fn at_optimum_no_change() {
        let (mut problem, _) = small_problem(1, 0.0);
        let before = problem.clone();
        let rep = solve(&mut problem, &BaOptions::default()).unwrap();
        assert!(rep.initial_cost < 1e-15);
        assert!(rep.final_cost <= rep.initial_cost);
        assert_eq!(rep.iterations, 0);
        assert_eq!(problem, before);
    }

    #[test]
    fn converges_from_rotation_noise() {
        let (mut problem, _) = small_problem(2, 0.5);
        let rep = solve(&mut problem, &BaOptions::default()).unwrap();
        assert!(rep.initial_cost > 1.0);
        assert!(rep.mean_reprojection_error < 1e-6, "{rep:?}");
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rejects_underobserved_points() {
        let (mut problem, _) = small_problem(3, 0.0);
        problem.observations.retain(|o| !(o.point == 0 && o.camera > 0));
        assert!(matches!(solve(&mut problem, &BaOptions::default()), Err(BundleError::InvalidProblem(_))));
    }

    #[test]
    fn cauchy_loss_is_subquadratic() {
        let l = RobustLoss::Cauchy { scale: 2.0 };
        assert!(l.rho(100.0) < 100.0);
        assert!((l.rho(1e-8) - 1e-8).abs() < 1e-15);
    }
}

//! Incremental reconstruction: seed pair, next-best-view registration,
//! triangulation and bundle-adjustment scheduling.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::bundle::{self, BaCamera, BaObservation, BaOptions, BaPoint, BaProblem, BundleError, CameraFixing};
use crate::camera::{Pose, SpherePoint};
use crate::features::{pair_seed, MatchGraph, TrackState};
use crate::resection::{estimate_pose_ransac, Correspondence2D3D, ResectionError};
use crate::two_view::{
    decompose_essential, estimate_essential_ransac, max_parallax_angle, refine_relative_pose, triangulate,
    triangulate_multi, RansacParams, RelativePose,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("no image pair qualifies as seed (best: {best_inliers} inliers, median angle {best_angle_deg:.2} deg)")]
    NoSeed { best_inliers: usize, best_angle_deg: f64 },
    #[error("seed initialization kept only {0} points")]
    SeedCollapse(usize),
    #[error("no unregistered image has enough observations")]
    NoCandidate,
    #[error("image {image} has only {got} 2D-3D correspondences")]
    TooFewCorrespondences { image: usize, got: usize },
    #[error("registration of image {image} failed: {source}")]
    Registration { image: usize, source: ResectionError },
    #[error("match graph is empty")]
    EmptyGraph,
    #[error(transparent)]
    Bundle(#[from] BundleError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnginePolicy {
    pub seed_min_inliers: usize,
    pub seed_min_tri_angle_deg: f64,
    pub min_obs_for_registration: usize,
    pub local_ba_window: usize,
    pub global_ba_growth: f64,
    pub ransac: RansacParams,
    pub max_reproj_px: f64,
    pub min_tri_angle_point_deg: f64,
    pub max_registration_retries: usize,
    pub min_registration_inliers: usize,
    pub score_levels: u32,
    pub ba: BaOptions,
}

impl Default for EnginePolicy {
    fn default() -> Self {
        EnginePolicy {
            seed_min_inliers: 100,
            seed_min_tri_angle_deg: 16.0,
            min_obs_for_registration: 30,
            local_ba_window: 3,
            global_ba_growth: 0.10,
            ransac: RansacParams::default(),
            max_reproj_px: 4.0,
            min_tri_angle_point_deg: 1.5,
            max_registration_retries: 2,
            min_registration_inliers: 12,
            score_levels: 6,
            ba: BaOptions::default(),
        }
    }
}

/// Trace of the decisions taken during a run.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent {
    SeedCandidate {
        image_a: usize,
        image_b: usize,
        inliers: usize,
        median_angle_deg: f64,
        accepted: bool,
    },
    Initialized {
        image_a: usize,
        image_b: usize,
        points: usize,
    },
    CandidateFiltered {
        image: usize,
        n_obs: usize,
    },
    NextBest {
        image: usize,
        score: u64,
        n_obs: usize,
    },
    Registered {
        image: usize,
        inliers: usize,
        correspondences: usize,
        new_points: usize,
    },
    RegistrationFailed {
        image: usize,
        attempt: usize,
    },
    /// Bundle-adjustment scheduling after a registration. `images_since_global`
    /// and `points_since_global` are the growth since the last global adjustment.
    BaDecision {
        registered: usize,
        points: usize,
        images_since_global: usize,
        points_since_global: usize,
        global: bool,
    },
    LocalBa {
        images: Vec<usize>,
        final_cost: f64,
    },
    GlobalBa {
        images: usize,
        points: usize,
        final_cost: f64,
    },
    PointsFiltered {
        removed: usize,
        remaining: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconPoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub track: usize,
    /// `(image, feature)` observations used for this point, all in registered images.
    pub observations: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reconstruction {
    pub registered: BTreeMap<usize, Pose>,
    pub registration_order: Vec<usize>,
    pub points: Vec<ReconPoint>,
    pub track_states: Vec<TrackState>,
    pub seed: Option<(usize, usize)>,
    pub events: Vec<EngineEvent>,
    feature_track: Vec<Vec<Option<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResidual {
    pub image: usize,
    pub observations: usize,
    pub mean_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconStats {
    pub registered: usize,
    pub total_images: usize,
    pub points: usize,
    pub observations: usize,
    pub mean_reproj_px: f64,
    pub rms_reproj_px: f64,
    pub per_image: Vec<ImageResidual>,
}

impl Reconstruction {
    /// Empty reconstruction indexed against `graph`'s tracks.
    pub fn new(graph: &MatchGraph) -> Self {
        let mut feature_track: Vec<Vec<Option<usize>>> = graph.images.iter().map(|i| vec![None; i.features.len()]).collect();
        for (t, track) in graph.tracks.iter().enumerate() {
            for &(img, f) in &track.observations {
                feature_track[img][f] = Some(t);
            }
        }
        Reconstruction {
            track_states: vec![TrackState::Unreconstructed; graph.tracks.len()],
            feature_track,
            ..Default::default()
        }
    }

    /// Rebuilds the feature-to-track index if it does not match `graph`.
    pub fn ensure_index(&mut self, graph: &MatchGraph) {
        if self.feature_track.len() != graph.images.len() {
            self.feature_track = Reconstruction::new(graph).feature_track;
            self.track_states.resize(graph.tracks.len(), TrackState::Unreconstructed);
        }
    }

    pub fn cameras(&self) -> Vec<(usize, Pose)> {
        self.registered.iter().map(|(i, p)| (*i, *p)).collect()
    }

    pub fn unregistered(&self, graph: &MatchGraph) -> Vec<usize> {
        (0..graph.images.len()).filter(|i| !self.registered.contains_key(i)).collect()
    }

    fn point_of_feature(&self, image: usize, feature: usize) -> Option<usize> {
        let t = (*self.feature_track.get(image)?.get(feature)?)?;
        match self.track_states[t] {
            TrackState::Reconstructed(p) => Some(p),
            _ => None,
        }
    }

    /// Per-observation pixel residual norms, grouped by image.
    pub fn residuals(&self, graph: &MatchGraph) -> BTreeMap<usize, Vec<f64>> {
        let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for pt in &self.points {
            for &(img, f) in &pt.observations {
                let (Some(pose), Some(gi)) = (self.registered.get(&img), graph.images.get(img)) else {
                    continue;
                };
                if let Ok(r) = bundle::cost_rprj(pose, &pt.position, gi.features[f].pix, gi.dims) {
                    out.entry(img).or_default().push(r.norm());
                }
            }
        }
        out
    }

    pub fn stats(&self, graph: &MatchGraph) -> ReconStats {
        let res = self.residuals(graph);
        let all: Vec<f64> = res.values().flatten().copied().collect();
        let n = all.len().max(1) as f64;
        ReconStats {
            registered: self.registered.len(),
            total_images: graph.images.len(),
            points: self.points.len(),
            observations: all.len(),
            mean_reproj_px: all.iter().sum::<f64>() / n,
            rms_reproj_px: (all.iter().map(|r| r * r).sum::<f64>() / n).sqrt(),
            per_image: res
                .iter()
                .map(|(i, v)| ImageResidual {
                    image: *i,
                    observations: v.len(),
                    mean_px: v.iter().sum::<f64>() / v.len().max(1) as f64,
                })
                .collect(),
        }
    }

    /// Checks the structural invariants: at least two registered observers per
    /// point, positive cheirality and reprojection within `max_reproj_px`.
    pub fn audit(&self, graph: &MatchGraph, max_reproj_px: f64) -> Result<(), String> {
        for (i, pt) in self.points.iter().enumerate() {
            if pt.observations.len() < 2 {
                return Err(format!("point {i} has {} observations", pt.observations.len()));
            }
            let mut images: Vec<usize> = pt.observations.iter().map(|o| o.0).collect();
            images.dedup();
            if images.len() != pt.observations.len() {
                return Err(format!("point {i} observed twice in one image"));
            }
            for &(img, f) in &pt.observations {
                let pose = self.registered.get(&img).ok_or(format!("point {i} observed by unregistered image {img}"))?;
                let bearing = graph.bearing(img, f).ok_or(format!("bad feature {img}/{f}"))?;
                if bearing.as_vector().dot(&pose.transform(&pt.position)) <= 0.0 {
                    return Err(format!("point {i} fails cheirality in image {img}"));
                }
                let gi = &graph.images[img];
                let r = bundle::cost_rprj(pose, &pt.position, gi.features[f].pix, gi.dims).map_err(|e| e.to_string())?;
                if r.norm() > max_reproj_px {
                    return Err(format!("point {i} reprojects {:.3} px off in image {img}", r.norm()));
                }
            }
            if self.track_states.get(pt.track) != Some(&TrackState::Reconstructed(i)) {
                return Err(format!("track state of point {i} out of sync"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub image_a: usize,
    pub image_b: usize,
    pub relative: RelativePose,
    pub inliers: usize,
    pub median_angle_deg: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Relative orientation of one candidate pair: inlier count, refined pose with
/// a unit baseline, and the median triangulation angle of its inliers.
pub fn evaluate_seed_pair(
    graph: &MatchGraph,
    a: usize,
    b: usize,
    policy: &EnginePolicy,
) -> Option<SeedResult> {
    let pair = graph
        .pairs
        .iter()
        .find(|p| (p.image_a, p.image_b) == (a.min(b), a.max(b)))?;
    let swap = pair.image_a != a;
    let mut p1 = Vec::new();
    let mut p2 = Vec::new();
    for &(fa, fb) in &pair.matches {
        let (fa, fb) = if swap { (fb, fa) } else { (fa, fb) };
        if let (Some(x), Some(y)) = (graph.bearing(a, fa), graph.bearing(b, fb)) {
            p1.push(x);
            p2.push(y);
        }
    }
    let dims = graph.images[a].dims;
    let ransac = RansacParams {
        rng_seed: pair_seed(policy.ransac.rng_seed, a, b),
        ..policy.ransac
    };
    let est = estimate_essential_ransac(&p1, &p2, dims, &ransac).ok()?;
    let rel = decompose_essential(&est.essential, &p1, &p2, &est.inliers).ok()?;
    let in1: Vec<SpherePoint> = p1.iter().zip(&est.inliers).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let in2: Vec<SpherePoint> = p2.iter().zip(&est.inliers).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let (rel, _) = refine_relative_pose(&rel, &in1, &in2, &crate::optim::LmOptions::default());
    let rel = RelativePose {
        rotation: rel.rotation,
        translation: rel.translation.normalize(),
    };
    let pose_b = rel.as_pose();
    let angles: Vec<f64> = in1
        .iter()
        .zip(&in2)
        .filter_map(|(x, y)| triangulate(&Pose::identity(), &pose_b, x, y).ok().map(|(_, ang)| ang.to_degrees()))
        .collect();
    Some(SeedResult {
        image_a: a,
        image_b: b,
        relative: rel,
        inliers: est.num_inliers(),
        median_angle_deg: median(angles),
    })
}

/// Walks candidate pairs in order of match support and returns the first one
/// passing both seed thresholds.
pub fn select_seed_pair(
    graph: &MatchGraph,
    policy: &EnginePolicy,
    events: &mut Vec<EngineEvent>,
) -> Result<SeedResult, EngineError> {
    let mut totals = vec![0usize; graph.images.len()];
    let mut neighbours: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph.images.len()];
    for p in graph.verified_pairs() {
        let n = p.num_inliers();
        totals[p.image_a] += n;
        totals[p.image_b] += n;
        neighbours[p.image_a].push((p.image_b, n));
        neighbours[p.image_b].push((p.image_a, n));
    }
    let mut firsts: Vec<usize> = (0..graph.images.len()).filter(|&i| totals[i] > 0).collect();
    firsts.sort_by(|x, y| totals[*y].cmp(&totals[*x]).then(x.cmp(y)));

    let mut tried = std::collections::HashSet::new();
    let mut best = (0usize, 0.0f64);
    for a in firsts {
        let mut others = neighbours[a].clone();
        others.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
        for (b, _) in others {
            if !tried.insert((a.min(b), a.max(b))) {
                continue;
            }
            let Some(cand) = evaluate_seed_pair(graph, a, b, policy) else {
                continue;
            };
            let accepted = cand.inliers > policy.seed_min_inliers && cand.median_angle_deg > policy.seed_min_tri_angle_deg;
            events.push(EngineEvent::SeedCandidate {
                image_a: a,
                image_b: b,
                inliers: cand.inliers,
                median_angle_deg: cand.median_angle_deg,
                accepted,
            });
            if (cand.inliers, cand.median_angle_deg) > best {
                best = (cand.inliers, cand.median_angle_deg);
            }
            if accepted {
                return Ok(cand);
            }
        }
    }
    Err(EngineError::NoSeed {
        best_inliers: best.0,
        best_angle_deg: best.1,
    })
}

/// Triangulates a track from its registered observations, discarding views
/// that fail cheirality or the reprojection bound.
fn triangulate_track(graph: &MatchGraph, recon: &Reconstruction, track: usize, policy: &EnginePolicy) -> Option<ReconPoint> {
    let mut views: Vec<(usize, usize, Pose, SpherePoint)> = graph.tracks[track]
        .observations
        .iter()
        .filter_map(|&(img, f)| Some((img, f, *recon.registered.get(&img)?, graph.bearing(img, f)?)))
        .collect();
    let min_angle = policy.min_tri_angle_point_deg.to_radians();
    for _ in 0..3 {
        if views.len() < 2 {
            return None;
        }
        let rays: Vec<(Pose, SpherePoint)> = views.iter().map(|v| (v.2, v.3)).collect();
        let (x, _) = triangulate_multi(&rays).ok()?;
        let kept: Vec<_> = views
            .iter()
            .filter(|(img, f, pose, bearing)| {
                let gi = &graph.images[*img];
                bearing.as_vector().dot(&pose.transform(&x)) > 0.0
                    && bundle::cost_rprj(pose, &x, gi.features[*f].pix, gi.dims).is_ok_and(|r| r.norm() <= policy.max_reproj_px)
            })
            .cloned()
            .collect();
        if kept.len() == views.len() {
            let centers: Vec<Vector3<f64>> = views.iter().map(|v| v.2.center()).collect();
            if max_parallax_angle(&x, &centers) < min_angle {
                return None;
            }
            return Some(ReconPoint {
                position: x,
                color: [128, 128, 128],
                track,
                observations: views.iter().map(|v| (v.0, v.1)).collect(),
            });
        }
        views = kept;
    }
    None
}

fn add_point(recon: &mut Reconstruction, pt: ReconPoint) {
    let idx = recon.points.len();
    recon.track_states[pt.track] = TrackState::Reconstructed(idx);
    recon.points.push(pt);
}

/// Drops observations that fail cheirality or reprojection, then points with
/// fewer than two observations or too little parallax. Returns the number removed.
pub fn filter_points(graph: &MatchGraph, recon: &mut Reconstruction, policy: &EnginePolicy) -> usize {
    let min_angle = policy.min_tri_angle_point_deg.to_radians();
    let before = recon.points.len();
    let mut kept = Vec::with_capacity(before);
    let points = std::mem::take(&mut recon.points);
    for mut pt in points {
        pt.observations.retain(|&(img, f)| {
            let (Some(pose), Some(bearing)) = (recon.registered.get(&img), graph.bearing(img, f)) else {
                return false;
            };
            let gi = &graph.images[img];
            bearing.as_vector().dot(&pose.transform(&pt.position)) > 0.0
                && bundle::cost_rprj(pose, &pt.position, gi.features[f].pix, gi.dims).is_ok_and(|r| r.norm() <= policy.max_reproj_px)
        });
        let centers: Vec<Vector3<f64>> = pt.observations.iter().map(|o| recon.registered[&o.0].center()).collect();
        if pt.observations.len() >= 2 && max_parallax_angle(&pt.position, &centers) >= min_angle {
            kept.push(pt);
        } else {
            recon.track_states[pt.track] = TrackState::Rejected;
        }
    }
    for (i, pt) in kept.iter().enumerate() {
        recon.track_states[pt.track] = TrackState::Reconstructed(i);
    }
    recon.points = kept;
    let removed = before - recon.points.len();
    recon.events.push(EngineEvent::PointsFiltered {
        removed,
        remaining: recon.points.len(),
    });
    removed
}

/// Bundle adjustment over `free` cameras and every point they observe; other
/// registered cameras observing those points enter as fixed.
fn adjust(graph: &MatchGraph, recon: &mut Reconstruction, free: &[usize], policy: &EnginePolicy) -> Result<f64, EngineError> {
    let free_set: std::collections::BTreeSet<usize> = free.iter().copied().collect();
    let point_ids: Vec<usize> = (0..recon.points.len())
        .filter(|&i| recon.points[i].observations.iter().any(|o| free_set.contains(&o.0)))
        .collect();
    let mut cam_index: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in &point_ids {
        for o in &recon.points[p].observations {
            cam_index.entry(o.0).or_insert(0);
        }
    }
    for f in free {
        cam_index.entry(*f).or_insert(0);
    }
    let cam_list: Vec<usize> = cam_index.keys().copied().collect();
    for (k, img) in cam_list.iter().enumerate() {
        cam_index.insert(*img, k);
    }
    let cameras: Vec<BaCamera> = cam_list
        .iter()
        .map(|img| BaCamera {
            pose: recon.registered[img],
            fixing: if free_set.contains(img) { CameraFixing::Free } else { CameraFixing::Fixed },
        })
        .collect();
    let points: Vec<BaPoint> = point_ids
        .iter()
        .map(|&p| BaPoint {
            position: recon.points[p].position,
            fixed: false,
        })
        .collect();
    let mut observations = Vec::new();
    for (k, &p) in point_ids.iter().enumerate() {
        for &(img, f) in &recon.points[p].observations {
            let gi = &graph.images[img];
            observations.push(BaObservation {
                camera: cam_index[&img],
                point: k,
                pixel: gi.features[f].pix,
                dims: gi.dims,
            });
        }
    }
    let mut problem = BaProblem::new(cameras, points, observations);
    let fixed = problem.cameras.iter().filter(|c| c.fixing == CameraFixing::Fixed).count();
    if let Some((a, b)) = recon.seed {
        match (cam_index.get(&a), cam_index.get(&b)) {
            (Some(&ia), Some(&ib)) if fixed < 2 && (problem.cameras[ib].fixing == CameraFixing::Free || fixed == 0) => {
                bundle::fix_gauge(&mut problem, ia, ib);
            }
            _ => {}
        }
    }
    if problem.observations.is_empty() {
        return Ok(0.0);
    }
    let report = bundle::solve(&mut problem, &policy.ba)?;
    for (k, img) in cam_list.iter().enumerate() {
        recon.registered.insert(*img, problem.cameras[k].pose);
    }
    for (k, &p) in point_ids.iter().enumerate() {
        recon.points[p].position = problem.points[k].position;
    }
    Ok(report.final_cost)
}

/// Rescales the scene about the first seed camera so the seed baseline is 1.
fn normalize_scale(recon: &mut Reconstruction) {
    let Some((a, b)) = recon.seed else { return };
    let (ca, cb) = (recon.registered[&a].center(), recon.registered[&b].center());
    let len = (cb - ca).norm();
    if !(len > 0.0) || (len - 1.0).abs() < f64::EPSILON {
        return;
    }
    let s = 1.0 / len;
    for pose in recon.registered.values_mut() {
        let c = ca + (pose.center() - ca) * s;
        *pose = Pose::from_center(pose.rotation, &c);
    }
    for pt in &mut recon.points {
        pt.position = ca + (pt.position - ca) * s;
    }
}

fn global_adjust(graph: &MatchGraph, recon: &mut Reconstruction, policy: &EnginePolicy) -> Result<(), EngineError> {
    let all: Vec<usize> = recon.registered.keys().copied().collect();
    let cost = adjust(graph, recon, &all, policy)?;
    normalize_scale(recon);
    recon.events.push(EngineEvent::GlobalBa {
        images: recon.registered.len(),
        points: recon.points.len(),
        final_cost: cost,
    });
    filter_points(graph, recon, policy);
    Ok(())
}

/// Two-camera reconstruction from a seed: triangulation, global adjustment and filtering.
pub fn initialize(graph: &MatchGraph, seed: &SeedResult, policy: &EnginePolicy) -> Result<Reconstruction, EngineError> {
    let mut recon = Reconstruction::new(graph);
    let (a, b) = (seed.image_a, seed.image_b);
    recon.registered.insert(a, Pose::identity());
    recon.registered.insert(b, seed.relative.as_pose());
    recon.registration_order = vec![a, b];
    recon.seed = Some((a, b));
    let candidates: Vec<usize> = (0..graph.tracks.len())
        .filter(|&t| {
            let tr = &graph.tracks[t];
            tr.feature_in(a).is_some() && tr.feature_in(b).is_some()
        })
        .collect();
    let pts: Vec<Option<ReconPoint>> = candidates
        .par_iter()
        .map(|&t| triangulate_track(graph, &recon, t, policy))
        .collect();
    for pt in pts.into_iter().flatten() {
        add_point(&mut recon, pt);
    }
    if recon.points.len() >= 3 {
        global_adjust(graph, &mut recon, policy)?;
    }
    if recon.points.len() < 3 {
        return Err(EngineError::SeedCollapse(recon.points.len()));
    }
    recon.events.push(EngineEvent::Initialized {
        image_a: a,
        image_b: b,
        points: recon.points.len(),
    });
    Ok(recon)
}

/// Multi-resolution occupancy score of pixel positions over `levels` grid levels.
pub fn grid_score(pixels: &[(f64, f64)], width: f64, height: f64, levels: u32) -> u64 {
    let mut score = 0u64;
    for l in 1..=levels {
        let cells = 1u64 << l;
        let mut occupied = std::collections::HashSet::new();
        for &(x, y) in pixels {
            let cx = ((x / width * cells as f64).floor() as i64).clamp(0, cells as i64 - 1);
            let cy = ((y / height * cells as f64).floor() as i64).clamp(0, cells as i64 - 1);
            occupied.insert((cx, cy));
        }
        score += cells * occupied.len() as u64;
    }
    score
}

/// Registration bookkeeping for images that failed once.
#[derive(Debug, Clone, Default)]
struct RetryState {
    attempts: HashMap<usize, usize>,
    failed_at: HashMap<usize, usize>,
}

impl RetryState {
    fn eligible(&self, image: usize, registered: usize, max_retries: usize) -> bool {
        match self.attempts.get(&image) {
            None => true,
            Some(&n) => n <= max_retries && registered > self.failed_at[&image],
        }
    }
}

/// The unregistered image with the best-spread observations of reconstructed points.
pub fn next_best_image(
    graph: &MatchGraph,
    recon: &mut Reconstruction,
    policy: &EnginePolicy,
) -> Result<(usize, u64, usize), EngineError> {
    next_best_filtered(graph, recon, policy, |_| true)
}

fn next_best_filtered<F: Fn(usize) -> bool + Sync>(
    graph: &MatchGraph,
    recon: &mut Reconstruction,
    policy: &EnginePolicy,
    eligible: F,
) -> Result<(usize, u64, usize), EngineError> {
    recon.ensure_index(graph);
    let rec: &Reconstruction = recon;
    let scored: Vec<(usize, usize, u64)> = rec
        .unregistered(graph)
        .into_par_iter()
        .filter(|&i| eligible(i))
        .map(|img| {
            let gi = &graph.images[img];
            let pix: Vec<(f64, f64)> = (0..gi.features.len())
                .filter(|&f| rec.point_of_feature(img, f).is_some())
                .map(|f| (gi.features[f].pix.ix, gi.features[f].pix.iy))
                .collect();
            let score = grid_score(&pix, gi.dims.w(), gi.dims.h(), policy.score_levels);
            (img, pix.len(), score)
        })
        .collect();
    let mut best: Option<(usize, usize, u64)> = None;
    for (img, n_obs, score) in scored {
        if n_obs < policy.min_obs_for_registration {
            recon.events.push(EngineEvent::CandidateFiltered { image: img, n_obs });
            continue;
        }
        let better = match best {
            None => true,
            Some((bi, bn, bs)) => {
                (score, n_obs) > (bs, bn)
                    || ((score, n_obs) == (bs, bn) && (graph.images[img].name.as_str(), img) < (graph.images[bi].name.as_str(), bi))
            }
        };
        if better {
            best = Some((img, n_obs, score));
        }
    }
    let (img, n_obs, score) = best.ok_or(EngineError::NoCandidate)?;
    recon.events.push(EngineEvent::NextBest { image: img, score, n_obs });
    Ok((img, score, n_obs))
}

/// 2D–3D correspondences of `image` against the current points.
pub fn correspondences(graph: &MatchGraph, recon: &Reconstruction, image: usize) -> Vec<(usize, Correspondence2D3D)> {
    let gi = &graph.images[image];
    (0..gi.features.len())
        .filter_map(|f| {
            let p = recon.point_of_feature(image, f)?;
            Some((
                f,
                Correspondence2D3D {
                    bearing: graph.bearing(image, f)?,
                    point: recon.points[p].position,
                    track_id: recon.points[p].track,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub image: usize,
    pub pose: Pose,
    pub inliers: usize,
    pub correspondences: usize,
    pub inlier_mask: Vec<bool>,
    pub new_points: usize,
}

/// Resects `image`, attaches its inlier observations and triangulates new tracks.
pub fn register_image(
    graph: &MatchGraph,
    recon: &mut Reconstruction,
    image: usize,
    policy: &EnginePolicy,
) -> Result<Registration, EngineError> {
    register_attempt(graph, recon, image, policy, 0)
}

fn register_attempt(
    graph: &MatchGraph,
    recon: &mut Reconstruction,
    image: usize,
    policy: &EnginePolicy,
    attempt: usize,
) -> Result<Registration, EngineError> {
    recon.ensure_index(graph);
    let corr = correspondences(graph, recon, image);
    if corr.len() < 4 {
        return Err(EngineError::TooFewCorrespondences {
            image,
            got: corr.len(),
        });
    }
    let list: Vec<Correspondence2D3D> = corr.iter().map(|c| c.1).collect();
    let ransac = RansacParams {
        rng_seed: pair_seed(policy.ransac.rng_seed, image, 1 << 20 | attempt),
        ..policy.ransac
    };
    let est = estimate_pose_ransac(&list, graph.images[image].dims, &ransac)
        .map_err(|source| EngineError::Registration { image, source })?;
    let inliers = est.num_inliers();
    if inliers < policy.min_registration_inliers.max(4) {
        return Err(EngineError::Registration {
            image,
            source: ResectionError::NoConsensus,
        });
    }
    recon.registered.insert(image, est.pose);
    recon.registration_order.push(image);
    for ((f, _), &ok) in corr.iter().zip(&est.inliers) {
        if ok {
            if let Some(p) = recon.point_of_feature(image, *f) {
                recon.points[p].observations.push((image, *f));
                recon.points[p].observations.sort_unstable();
            }
        }
    }
    let gi = &graph.images[image];
    let mut fresh: Vec<usize> = (0..gi.features.len())
        .filter_map(|f| recon.feature_track[image][f])
        .filter(|&t| !matches!(recon.track_states[t], TrackState::Reconstructed(_)))
        .collect();
    fresh.sort_unstable();
    fresh.dedup();
    let rec: &Reconstruction = recon;
    let pts: Vec<Option<ReconPoint>> = fresh.par_iter().map(|&t| triangulate_track(graph, rec, t, policy)).collect();
    let mut new_points = 0;
    for pt in pts.into_iter().flatten() {
        add_point(recon, pt);
        new_points += 1;
    }
    recon.events.push(EngineEvent::Registered {
        image,
        inliers,
        correspondences: corr.len(),
        new_points,
    });
    Ok(Registration {
        image,
        pose: est.pose,
        inliers,
        correspondences: corr.len(),
        inlier_mask: est.inliers,
        new_points,
    })
}

/// Full incremental reconstruction.
pub fn run(graph: &MatchGraph, policy: &EnginePolicy) -> Result<Reconstruction, EngineError> {
    if graph.images.is_empty() {
        return Err(EngineError::EmptyGraph);
    }
    let mut events = Vec::new();
    let seed = select_seed_pair(graph, policy, &mut events)?;
    let mut recon = initialize(graph, &seed, policy)?;
    events.append(&mut recon.events);
    recon.events = events;
    log::info!(
        "seed {}-{}: {} inliers, median angle {:.1} deg, {} points",
        graph.images[seed.image_a].name,
        graph.images[seed.image_b].name,
        seed.inliers,
        seed.median_angle_deg,
        recon.points.len()
    );

    let mut retry = RetryState::default();
    let mut last_global = (recon.registered.len(), recon.points.len());
    loop {
        let registered = recon.registered.len();
        let pick = next_best_filtered(graph, &mut recon, policy, |i| {
            retry.eligible(i, registered, policy.max_registration_retries)
        });
        let (image, _, _) = match pick {
            Ok(p) => p,
            Err(EngineError::NoCandidate) => break,
            Err(e) => return Err(e),
        };
        let attempt = retry.attempts.get(&image).copied().unwrap_or(0);
        match register_attempt(graph, &mut recon, image, policy, attempt) {
            Ok(reg) => {
                log::info!(
                    "registered {} ({} / {} inliers, {} new points)",
                    graph.images[image].name,
                    reg.inliers,
                    reg.correspondences,
                    reg.new_points
                );
            }
            Err(e) => {
                log::warn!("deferring {}: {e}", graph.images[image].name);
                *retry.attempts.entry(image).or_insert(0) += 1;
                retry.failed_at.insert(image, registered);
                recon.events.push(EngineEvent::RegistrationFailed {
                    image,
                    attempt: attempt + 1,
                });
                continue;
            }
        }
        let (reg, pts) = (recon.registered.len(), recon.points.len());
        let images_since = reg.saturating_sub(last_global.0);
        let points_since = pts.saturating_sub(last_global.1);
        let global = images_since as f64 > policy.global_ba_growth * reg as f64
            || points_since as f64 > policy.global_ba_growth * pts as f64;
        recon.events.push(EngineEvent::BaDecision {
            registered: reg,
            points: pts,
            images_since_global: images_since,
            points_since_global: points_since,
            global,
        });
        if global {
            global_adjust(graph, &mut recon, policy)?;
            last_global = (recon.registered.len(), recon.points.len());
        } else {
            let window: Vec<usize> = recon
                .registration_order
                .iter()
                .rev()
                .take(policy.local_ba_window)
                .copied()
                .collect();
            let cost = adjust(graph, &mut recon, &window, policy)?;
            recon.events.push(EngineEvent::LocalBa {
                images: window,
                final_cost: cost,
            });
            filter_points(graph, &mut recon, policy);
        }
    }
    global_adjust(graph, &mut recon, policy)?;
    Ok(recon)
}

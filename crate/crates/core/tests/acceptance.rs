//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use image::{Rgb, RgbImage};
use nalgebra::{Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use spherical_sfm::bundle::{fix_gauge, reprojection_jacobian, solve, BaCamera, BaObservation, BaOptions, BaPoint, BaProblem, CameraFixing};
use spherical_sfm::camera::{
    geo_to_pixel, geo_to_sphere, pixel_to_geo, pixel_to_sphere, project_to_pixel, rotation_angle, skew, sphere_to_geo, world_to_sphere,
    ImageDims, Intrinsics, PixelCoord, Pose, SpherePoint,
};
use spherical_sfm::cli::render_panorama;
use spherical_sfm::cubemap::{export_for_mvs, face_pixel_to_sphere_dir, project_to_face, render_face, update_pose, CubeFaceSpec, ErpImage, Face, Interpolation};
use spherical_sfm::engine::{run, EngineError, EngineEvent, EnginePolicy, Reconstruction};
use spherical_sfm::features::{build_match_graph, MatchGraph, MatchParams, PairSelectionPolicy};
use spherical_sfm::optim::LmOptions;
use spherical_sfm::resection::{estimate_pose_ransac, Correspondence2D3D};
use spherical_sfm::synth::{compare_reconstruction, generate, image_name, observe, Layout, SyntheticScene};
use spherical_sfm::two_view::{decompose_essential, essential_8point, estimate_essential_ransac, refine_relative_pose, RansacParams};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn erp_dims() -> ImageDims {
    ImageDims::new(5640, 2820).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    if r == 0.0 {
        return Vector3::zeros();
    }
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn rand_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = rand_vec(rng, 1.0);
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn rand_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation3<f64> {
    Rotation3::new(rand_unit(rng) * rng.random_range(0.0..max_angle))
}

/// Bearing of a world point observed with Gaussian pixel noise.
fn noisy_bearing(x: &Vector3<f64>, pose: &Pose, sigma: f64, rng: &mut ChaCha8Rng) -> SpherePoint {
    let intr = Intrinsics::new(erp_dims());
    let p = project_to_pixel(x, pose, &intr).unwrap();
    let n = Normal::new(0.0, sigma.max(1e-300)).unwrap();
    let (dx, dy) = if sigma > 0.0 { (n.sample(rng), n.sample(rng)) } else { (0.0, 0.0) };
    let iy = (p.iy + dy).clamp(1e-3, erp_dims().h() - 1e-3);
    pixel_to_sphere(PixelCoord::new((p.ix + dx).rem_euclid(erp_dims().w()), iy), &intr).unwrap()
}

fn camera_model_round_trips() -> Outcome {
    let t = Instant::now();
    let dims = erp_dims();
    let intr = Intrinsics::new(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut max_px, mut max_vec) = (0.0f64, 0.0f64);
    for _ in 0..100_000 {
        let pix = PixelCoord::new(rng.random_range(0.5..dims.w() - 0.5), rng.random_range(0.5..dims.h() - 0.5));
        let s = geo_to_sphere(pixel_to_geo(pix, &intr).map_err(|e| e.to_string())?);
        let back = geo_to_pixel(sphere_to_geo(s.as_vector()).map_err(|e| e.to_string())?, &intr);
        max_px = max_px.max((back.ix - pix.ix).abs()).max((back.iy - pix.iy).abs());

        let v = rand_unit(&mut rng);
        let px = geo_to_pixel(sphere_to_geo(&v).map_err(|e| e.to_string())?, &intr);
        let w = geo_to_sphere(pixel_to_geo(px, &intr).map_err(|e| e.to_string())?);
        max_vec = max_vec.max((w.as_vector() - v).amax());
    }
    let secs = t.elapsed().as_secs_f64();
    check(max_px <= 1e-9, format!("pixel round trip error {max_px:.2e}"))?;
    check(max_vec <= 1e-12, format!("unit vector round trip error {max_vec:.2e}"))?;
    check(secs < 1.0, format!("took {secs:.2} s"))?;
    Ok(format!("max pixel error {max_px:.1e}, max vector error {max_vec:.1e}, {secs:.2} s"))
}

fn eight_point_oracle() -> Outcome {
    let (mut worst_e, mut worst_r, mut worst_t) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let rot = rand_rotation(&mut rng, 1.0);
        let trans = rand_unit(&mut rng) * rng.random_range(0.5..2.0);
        let pose_b = Pose::new(rot, trans);
        let (mut p1, mut p2) = (Vec::new(), Vec::new());
        while p1.len() < 20 {
            let x = rand_vec(&mut rng, 6.0);
            if x.norm() < 0.5 || (x - pose_b.center()).norm() < 0.5 {
                continue;
            }
            p1.push(SpherePoint::from_vector(&x).unwrap());
            p2.push(world_to_sphere(&x, &pose_b).unwrap());
        }
        let est = essential_8point(&p1, &p2).map_err(|e| format!("seed {seed}: {e}"))?;
        let truth = skew(&trans) * rot.matrix();
        let (mut e, t) = (est.0 / est.0.norm(), truth / truth.norm());
        if e.dot(&t) < 0.0 {
            e = -e;
        }
        worst_e = worst_e.max((e - t).norm());
        let rel = decompose_essential(&est, &p1, &p2, &[true; 20]).map_err(|e| format!("seed {seed}: {e}"))?;
        worst_r = worst_r.max(rotation_angle(&rel.rotation, &rot));
        worst_t = worst_t.max(rel.translation.angle(&trans));
    }
    check(worst_e <= 1e-6, format!("essential Frobenius error {worst_e:.2e}"))?;
    check(worst_r <= 1e-6, format!("rotation error {worst_r:.2e} rad"))?;
    check(worst_t <= 1e-6, format!("translation direction error {worst_t:.2e} rad"))?;
    Ok(format!("worst |E| {worst_e:.1e}, R {worst_r:.1e} rad, T {worst_t:.1e} rad over 100 scenes"))
}

fn ransac_robustness() -> Outcome {
    let t0 = Instant::now();
    let (mut tp, mut fp, mut worst_rot) = (0usize, 0usize, 0.0f64);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let rot = rand_rotation(&mut rng, 0.5);
        let pose_b = Pose::from_center(rot, &(rand_unit(&mut rng) * 1.5));
        let (mut p1, mut p2) = (Vec::new(), Vec::new());
        for k in 0..100 {
            let x = rand_unit(&mut rng) * rng.random_range(3.0..10.0);
            p1.push(noisy_bearing(&x, &Pose::identity(), 0.5, &mut rng));
            if k < 70 {
                p2.push(noisy_bearing(&x, &pose_b, 0.5, &mut rng));
            } else {
                p2.push(SpherePoint::from_vector(&rand_unit(&mut rng)).unwrap());
            }
        }
        let params = RansacParams {
            rng_seed: seed,
            ..RansacParams::default()
        };
        let est = estimate_essential_ransac(&p1, &p2, erp_dims(), &params).map_err(|e| format!("seed {seed}: {e}"))?;
        tp += est.inliers[..70].iter().filter(|&&b| b).count();
        fp += est.inliers[70..].iter().filter(|&&b| b).count();
        let rel = decompose_essential(&est.essential, &p1, &p2, &est.inliers).map_err(|e| format!("seed {seed}: {e}"))?;
        let keep = |v: &[SpherePoint]| v.iter().zip(&est.inliers).filter(|(_, &m)| m).map(|(p, _)| *p).collect::<Vec<_>>();
        let (rel, _) = refine_relative_pose(&rel, &keep(&p1), &keep(&p2), &LmOptions::default());
        worst_rot = worst_rot.max(rotation_angle(&rel.rotation, &rot).to_degrees());
    }
    let secs = t0.elapsed().as_secs_f64();
    let recall = tp as f64 / 7000.0;
    let precision = tp as f64 / (tp + fp) as f64;
    check(recall >= 0.95, format!("recall {recall:.4}"))?;
    check(precision >= 0.99, format!("precision {precision:.4}"))?;
    check(worst_rot < 0.1, format!("rotation error {worst_rot:.3} deg"))?;
    check(secs < 5.0, format!("took {secs:.2} s"))?;
    Ok(format!("recall {recall:.4}, precision {precision:.4}, worst rotation {worst_rot:.4} deg, {secs:.2} s"))
}

fn resection_scene(seed: u64, backward: bool) -> Result<(f64, f64), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let truth = Pose::from_center(rand_rotation(&mut rng, std::f64::consts::PI), &rand_vec(&mut rng, 2.0));
    let inverse = truth.inverse();
    let mut corrs = Vec::new();
    let mut pts = Vec::new();
    for k in 0..50 {
        let mut local = rand_unit(&mut rng) * rng.random_range(2.0..10.0);
        if backward {
            local.z = -local.z.abs() - 0.1;
        }
        let x = inverse.transform(&local);
        pts.push(x);
        let bearing = if k < 35 {
            noisy_bearing(&x, &truth, 0.5, &mut rng)
        } else {
            SpherePoint::from_vector(&rand_unit(&mut rng)).unwrap()
        };
        corrs.push(Correspondence2D3D { bearing, point: x, track_id: k });
    }
    pts.push(truth.center());
    let lo = pts.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = pts.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    let diameter = (hi - lo).norm();
    let params = RansacParams {
        rng_seed: seed,
        ..RansacParams::default()
    };
    let est = estimate_pose_ransac(&corrs, erp_dims(), &params).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok((
        rotation_angle(&est.pose.rotation, &truth.rotation).to_degrees(),
        (est.pose.center() - truth.center()).norm() / diameter,
    ))
}

fn resection_accuracy() -> Outcome {
    let (mut rot, mut ctr) = (0.0f64, 0.0f64);
    let mut mismatched = 0;
    for seed in 0..100 {
        let (r1, c1) = resection_scene(seed, false)?;
        let (r2, c2) = resection_scene(seed, true)?;
        let ok1 = r1 < 0.1 && c1 < 1e-3;
        let ok2 = r2 < 0.1 && c2 < 1e-3;
        if ok1 != ok2 {
            mismatched += 1;
        }
        rot = rot.max(r1).max(r2);
        ctr = ctr.max(c1).max(c2);
    }
    check(rot < 0.1, format!("rotation error {rot:.4} deg"))?;
    check(ctr < 1e-3, format!("center error {ctr:.2e} of diameter"))?;
    check(mismatched == 0, format!("{mismatched} scenes differ between hemispheres"))?;
    Ok(format!("worst rotation {rot:.4} deg, worst center {ctr:.1e} of diameter, forward and backward sets agree"))
}

fn perturb(pose: &Pose, d: &[f64; 6]) -> Pose {
    Pose::new(
        Rotation3::new(Vector3::new(d[0], d[1], d[2])) * pose.rotation,
        pose.translation + Vector3::new(d[3], d[4], d[5]),
    )
}

fn ba_problem(seed: u64, rot_noise_deg: f64, extra_noise: f64) -> BaProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ImageDims::new(2000, 1000).unwrap();
    let intr = Intrinsics::new(dims);
    let truth: Vec<Pose> = (0..5)
        .map(|j| {
            let a = j as f64 * 1.1;
            Pose::from_center(Rotation3::new(Vector3::new(0.0, a, 0.0)), &Vector3::new(3.0 * a.cos(), 0.3 * j as f64, 3.0 * a.sin()))
        })
        .collect();
    let points: Vec<Vector3<f64>> = (0..80)
        .map(|_| Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-3.0..3.0), rng.random_range(-9.0..9.0)))
        .filter(|x| truth.iter().all(|p| (x - p.center()).norm() > 0.5))
        .collect();
    let mut observations = Vec::new();
    for (j, pose) in truth.iter().enumerate() {
        for (i, x) in points.iter().enumerate() {
            observations.push(BaObservation { camera: j, point: i, pixel: project_to_pixel(x, pose, &intr).unwrap(), dims });
        }
    }
    let cameras = truth
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let pose = if j == 0 {
                *p
            } else {
                let r = Rotation3::new(rand_unit(&mut rng) * rot_noise_deg.to_radians());
                Pose::from_center(r * p.rotation, &(p.center() + rand_vec(&mut rng, extra_noise)))
            };
            BaCamera { pose, fixing: CameraFixing::Free }
        })
        .collect();
    let pts = points.iter().map(|x| BaPoint { position: x + rand_vec(&mut rng, extra_noise), fixed: false }).collect();
    let mut problem = BaProblem::new(cameras, pts, observations);
    fix_gauge(&mut problem, 0, 1);
    problem
}

fn bundle_adjustment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = erp_dims();
    let intr = Intrinsics::new(dims);
    let f = |p: &Pose, x: &Vector3<f64>| {
        let px = project_to_pixel(x, p, &intr).unwrap();
        Vector2::new(px.ix, px.iy)
    };
    let (mut configs, mut worst) = (0, 0.0f64);
    while configs < 1000 {
        let pose = Pose::new(rand_rotation(&mut rng, 3.0), rand_vec(&mut rng, 2.0));
        let x = rand_vec(&mut rng, 8.0);
        let Ok(s) = world_to_sphere(&x, &pose) else { continue };
        let g = s.to_geo();
        if g.phi.abs() > 1.3 || g.theta.abs() > 3.0 || pose.transform(&x).norm() < 0.5 {
            continue;
        }
        configs += 1;
        let (_, jc, jp) = reprojection_jacobian(&pose, &x, dims).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for k in 0..6 {
            let mut d = [0.0; 6];
            d[k] = h;
            let plus = f(&perturb(&pose, &d), &x);
            d[k] = -h;
            let num = (plus - f(&perturb(&pose, &d), &x)) / (2.0 * h);
            worst = worst.max((num - jc.column(k)).norm() / jc.column(k).norm().max(1.0));
        }
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let num = (f(&pose, &(x + e)) - f(&pose, &(x - e))) / (2.0 * h);
            worst = worst.max((num - jp.column(k)).norm() / jp.column(k).norm().max(1.0));
        }
    }
    check(worst <= 1e-4, format!("Jacobian relative error {worst:.2e}"))?;

    let mut increases = 0;
    for seed in 0..50 {
        let mut p = ba_problem(100 + seed, 2.0, 0.05);
        let rep = solve(&mut p, &BaOptions::default()).map_err(|e| e.to_string())?;
        increases += rep.cost_history.windows(2).filter(|w| w[1] > w[0]).count();
    }
    check(increases == 0, format!("{increases} accepted steps increased the cost"))?;

    let mut p = ba_problem(7, 0.5, 0.0);
    let rep = solve(&mut p, &BaOptions::default()).map_err(|e| e.to_string())?;
    check(rep.mean_reprojection_error < 1e-6, format!("mean reprojection {:.2e} px", rep.mean_reprojection_error))?;
    Ok(format!(
        "Jacobian error {worst:.1e} over 1000 configurations, 50 monotone problems, perturbed scene {:.1e} px",
        rep.mean_reprojection_error
    ))
}

fn reconstruct(scene: &SyntheticScene, pairs: PairSelectionPolicy, policy: &EnginePolicy) -> Result<(MatchGraph, Reconstruction), String> {
    let obs = observe(scene).map_err(|e| e.to_string())?;
    let graph = build_match_graph(obs.images, &pairs, &MatchParams::default()).map_err(|e| e.to_string())?;
    let recon = run(&graph, policy).map_err(|e| e.to_string())?;
    Ok((graph, recon))
}

fn end_to_end() -> Outcome {
    let ring = Layout::Ring { n: 20, radius: 10.0 };
    let t = Instant::now();
    let scene = generate(ring, 500, erp_dims(), 7).map_err(|e| e.to_string())?;
    let (_, recon) = reconstruct(&scene, PairSelectionPolicy::exhaustive(), &EnginePolicy::default())?;
    let secs_a = t.elapsed().as_secs_f64();
    let cmp = compare_reconstruction(&recon.cameras(), &[], &scene).map_err(|e| e.to_string())?;
    check(recon.registered.len() == 20, format!("noise-free ring registered {}/20", recon.registered.len()))?;
    check(cmp.max_center_error() < 1e-6, format!("noise-free center error {:.2e}", cmp.max_center_error()))?;

    let t = Instant::now();
    let scene = generate(ring, 500, erp_dims(), 7).map_err(|e| e.to_string())?.with_noise(1.0);
    let (graph, recon) = reconstruct(&scene, PairSelectionPolicy::exhaustive(), &EnginePolicy::default())?;
    let secs_b = t.elapsed().as_secs_f64();
    let mean = recon.stats(&graph).mean_reproj_px;
    check(recon.registered.len() == 20, format!("noisy ring registered {}/20", recon.registered.len()))?;
    check((0.5..=1.5).contains(&mean), format!("noisy ring mean reprojection {mean:.3} px"))?;

    let t = Instant::now();
    let scene = generate(Layout::Corridor { n: 30, step: 3.0 }, 1500, erp_dims(), 11).map_err(|e| e.to_string())?;
    let (_, recon) = reconstruct(&scene, PairSelectionPolicy::sequential(5), &EnginePolicy::default())?;
    let secs_c = t.elapsed().as_secs_f64();
    let failures = recon.events.iter().filter(|e| matches!(e, EngineEvent::RegistrationFailed { .. })).count();
    check(recon.registered.len() == 30, format!("corridor registered {}/30", recon.registered.len()))?;
    check(failures == 0, format!("corridor had {failures} failed registrations"))?;
    for (name, s) in [("noise-free ring", secs_a), ("noisy ring", secs_b), ("corridor", secs_c)] {
        check(s < 60.0, format!("{name} took {s:.1} s"))?;
    }
    Ok(format!(
        "ring 20/20 center {:.1e} ({secs_a:.1} s), noisy ring 20/20 mean {mean:.3} px ({secs_b:.1} s), corridor 30/30 ({secs_c:.1} s)",
        cmp.max_center_error()
    ))
}

/// Replays the event trace and checks every decision against the policy.
fn audit_events(recon: &Reconstruction, policy: &EnginePolicy) -> Result<[usize; 4], String> {
    let ev = &recon.events;
    let mut counts = [0usize; 4]; // seed rejections, filtered candidates, global, local
    let mut accepted = None;
    for e in ev {
        if let EngineEvent::SeedCandidate { image_a, image_b, inliers, median_angle_deg, accepted: acc } = e {
            let expect = *inliers > policy.seed_min_inliers && *median_angle_deg > policy.seed_min_tri_angle_deg;
            check(expect == *acc, format!("seed candidate {image_a}-{image_b} decision {acc} with {inliers} inliers, {median_angle_deg:.2} deg"))?;
            check(accepted.is_none(), "candidate evaluated after a seed was accepted")?;
            if *acc {
                accepted = Some((*image_a, *image_b));
            } else {
                counts[0] += 1;
            }
        }
    }
    let seed = accepted.ok_or("no accepted seed")?;
    check(recon.seed == Some(seed), "initialized pair differs from the accepted seed")?;

    let (mut reg, mut pts) = (2usize, 0usize);
    let mut last_global: Option<(usize, usize)> = None;
    let mut after_global = false;
    for (k, e) in ev.iter().enumerate() {
        match e {
            EngineEvent::CandidateFiltered { n_obs, .. } => {
                check(*n_obs < policy.min_obs_for_registration, format!("filtered a candidate with {n_obs} observations"))?;
                counts[1] += 1;
            }
            EngineEvent::NextBest { n_obs, .. } => {
                check(*n_obs >= policy.min_obs_for_registration, format!("selected a candidate with {n_obs} observations"))?;
            }
            EngineEvent::Registered { new_points, .. } => {
                reg += 1;
                pts += new_points;
            }
            EngineEvent::GlobalBa { .. } => after_global = true,
            EngineEvent::PointsFiltered { remaining, .. } => {
                pts = *remaining;
                if after_global {
                    last_global = Some((reg, pts));
                    after_global = false;
                }
            }
            EngineEvent::BaDecision { registered, points, images_since_global, points_since_global, global } => {
                let (lg_reg, lg_pts) = last_global.ok_or("no global adjustment before the first decision")?;
                check(*registered == reg && *points == pts, format!("decision sees {registered}/{points}, replay has {reg}/{pts}"))?;
                check(*images_since_global == reg - lg_reg && *points_since_global == pts - lg_pts, "growth since last global adjustment differs")?;
                let expect = (reg - lg_reg) as f64 > policy.global_ba_growth * reg as f64
                    || (pts - lg_pts) as f64 > policy.global_ba_growth * pts as f64;
                check(expect == *global, format!("global trigger {global} at {reg} images, {pts} points"))?;
                let next_ok = match ev.get(k + 1) {
                    Some(EngineEvent::GlobalBa { .. }) => *global,
                    Some(EngineEvent::LocalBa { images, .. }) => !*global && images.len() == policy.local_ba_window.min(reg),
                    _ => false,
                };
                check(next_ok, "adjustment after a decision does not match it")?;
                counts[if *global { 2 } else { 3 }] += 1;
            }
            _ => {}
        }
    }
    Ok(counts)
}

fn policy_conformance() -> Outcome {
    let mut totals = [0usize; 4];
    let corridor = generate(Layout::Corridor { n: 30, step: 3.0 }, 1500, erp_dims(), 11).map_err(|e| e.to_string())?;
    let ring = generate(Layout::Ring { n: 16, radius: 10.0 }, 500, erp_dims(), 3).map_err(|e| e.to_string())?.with_noise(0.5);
    let floors = generate(Layout::TwoFloors { n: 16 }, 600, erp_dims(), 5).map_err(|e| e.to_string())?;
    let strict = EnginePolicy {
        min_obs_for_registration: 120,
        seed_min_inliers: 250,
        seed_min_tri_angle_deg: 20.0,
        ..EnginePolicy::default()
    };
    let runs = [
        (&corridor, PairSelectionPolicy::sequential(5), EnginePolicy::default()),
        (&ring, PairSelectionPolicy::exhaustive(), EnginePolicy::default()),
        (&floors, PairSelectionPolicy::exhaustive(), EnginePolicy::default()),
        (&corridor, PairSelectionPolicy::sequential(5), strict),
    ];
    for (scene, pairs, policy) in runs {
        let (_, recon) = reconstruct(scene, pairs, &policy)?;
        let c = audit_events(&recon, &policy)?;
        for i in 0..4 {
            totals[i] += c[i];
        }
    }
    let obs = observe(&ring).map_err(|e| e.to_string())?;
    let graph = build_match_graph(obs.images, &PairSelectionPolicy::exhaustive(), &MatchParams::default()).map_err(|e| e.to_string())?;
    let impossible = EnginePolicy {
        seed_min_inliers: 10_000,
        ..EnginePolicy::default()
    };
    check(matches!(run(&graph, &impossible), Err(EngineError::NoSeed { .. })), "unreachable seed threshold did not fail")?;
    check(totals[0] > 0, "no seed candidate was ever rejected")?;
    check(totals[1] > 0, "the observation filter never fired")?;
    check(totals[2] > 0 && totals[3] > 0, "global and local adjustments were not both exercised")?;
    Ok(format!(
        "{} seed rejections, {} filtered candidates, {} global / {} local decisions, all consistent with policy",
        totals[0], totals[1], totals[2], totals[3]
    ))
}

fn dot_centroid(img: &RgbImage, cx: f64, cy: f64, r: i64) -> Option<(f64, f64)> {
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in (cy.round() as i64 - r)..=(cy.round() as i64 + r) {
        for x in (cx.round() as i64 - r)..=(cx.round() as i64 + r) {
            if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
                return None;
            }
            let w = img.get_pixel(x as u32, y as u32).0[0] as f64;
            sw += w;
            sx += w * x as f64;
            sy += w * y as f64;
        }
    }
    (sw > 0.0).then(|| (sx / sw, sy / sw))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().to_string(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn cubemap_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let intr = Intrinsics::new(erp_dims());
    let (mut worst_px, mut worst_center) = (0.0f64, 0.0f64);
    for face in Face::ALL {
        let spec = CubeFaceSpec::new(face, 1024);
        for _ in 0..100 {
            let pose = Pose::from_center(rand_rotation(&mut rng, std::f64::consts::PI), &rand_vec(&mut rng, 50.0));
            let face_pose = update_pose(&pose, &spec);
            worst_center = worst_center.max((face_pose.center() - pose.center()).norm() / pose.center().norm().max(1.0));
            let pix = PixelCoord::new(rng.random_range(1.0..1023.0), rng.random_range(1.0..1023.0));
            let dir = face_pixel_to_sphere_dir(pix, &spec);
            let world = pose.inverse().transform(&(dir.as_vector() * rng.random_range(1.0..30.0)));
            let erp = project_to_pixel(&world, &pose, &intr).map_err(|e| e.to_string())?;
            let bearing = pixel_to_sphere(erp, &intr).map_err(|e| e.to_string())?;
            let via_sphere = spec.project(&(spec.r_ps * bearing.as_vector())).ok_or("sphere path left the face")?;
            let via_face = project_to_face(&world, &face_pose, &spec).ok_or("face path left the face")?;
            let d = (via_sphere.ix - via_face.ix).hypot(via_sphere.iy - via_face.iy);
            worst_px = worst_px.max(d).max((via_face.ix - pix.ix).hypot(via_face.iy - pix.iy));
        }
    }
    check(worst_px < 0.5, format!("projection disagreement {worst_px:.3} px"))?;
    check(worst_center <= 1e-12, format!("center moved by {worst_center:.2e}"))?;

    // A bright dot drawn on the panorama must land where the face model predicts.
    // Integer pixel coordinates are sample positions in both rasters.
    let erp_small = ImageDims::new(2048, 1024).unwrap();
    let small = Intrinsics::new(erp_small);
    let mut worst_dot = 0.0f64;
    for face in Face::ALL {
        let spec = CubeFaceSpec::new(face, 1024);
        let pose = Pose::from_center(rand_rotation(&mut rng, 0.3), &rand_vec(&mut rng, 5.0));
        let pix = PixelCoord::new(rng.random_range(250.0..774.0), rng.random_range(250.0..774.0));
        let world = pose.inverse().transform(&(face_pixel_to_sphere_dir(pix, &spec).as_vector() * 7.0));
        let at = project_to_pixel(&world, &pose, &small).map_err(|e| e.to_string())?;
        let erp = RgbImage::from_fn(erp_small.width, erp_small.height, |x, y| {
            let dx = (x as f64 - at.ix + erp_small.w() / 2.0).rem_euclid(erp_small.w()) - erp_small.w() / 2.0;
            let dy = y as f64 - at.iy;
            Rgb([(250.0 * (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp()).round() as u8; 3])
        });
        let rendered = render_face(&erp, &spec, Interpolation::Bilinear);
        let predicted = project_to_face(&world, &update_pose(&pose, &spec), &spec).ok_or("dot not on face")?;
        let (cx, cy) = dot_centroid(&rendered, predicted.ix, predicted.iy, 14).ok_or("dot not found")?;
        worst_dot = worst_dot.max((cx - predicted.ix).hypot(cy - predicted.iy));
    }
    check(worst_dot < 0.5, format!("rendered dot off by {worst_dot:.3} px"))?;

    let scene = generate(Layout::Ring { n: 2, radius: 3.0 }, 200, ImageDims::new(512, 256).unwrap(), 9).map_err(|e| e.to_string())?;
    let mut recon = Reconstruction::default();
    for (i, p) in scene.poses.iter().enumerate() {
        recon.registered.insert(i, *p);
    }
    let images: Vec<ErpImage> = (0..2).map(|i| ErpImage { name: image_name(i), raster: render_panorama(&scene, i) }).collect();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let sa = export_for_mvs(&recon, &images, 128, Interpolation::Bilinear, &a).map_err(|e| e.to_string())?;
    export_for_mvs(&recon, &images, 128, Interpolation::Bilinear, &b).map_err(|e| e.to_string())?;
    let pngs = dir_bytes(&a).keys().filter(|k| k.ends_with(".png")).count();
    let manifest_lines = fs::read_to_string(&sa.manifest).map_err(|e| e.to_string())?.lines().count();
    check(sa.faces == 12 && pngs == 12 && manifest_lines == 12, format!("{pngs} faces, {manifest_lines} manifest lines"))?;
    check(dir_bytes(&a) == dir_bytes(&b), "re-export differs")?;
    Ok(format!(
        "projection agreement {worst_px:.1e} px, center shift {worst_center:.1e}, rendered dot {worst_dot:.3} px, 12 faces byte-identical on re-export"
    ))
}

fn sphsfm(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sphsfm")).args(args).output().map_err(|e| e.to_string())?;
    check(out.status.code() == Some(0), format!("sphsfm {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "1", "8", "8"].iter().enumerate() {
        let dir = tmp.path().join(format!("run{k}"));
        let d = dir.to_str().unwrap();
        let common = ["--seed", "11", "--threads", threads];
        let synth = ["synth", "--layout", "ring", "--cameras", "12", "--points", "400", "--noise", "1", "--outliers", "0.1", "-p", d];
        sphsfm(&[&common[..], &synth[..]].concat())?;
        sphsfm(&[&common[..], &["sfm", "--exhaustive", "-p", d][..]].concat())?;
        sphsfm(&[&common[..], &["export-ply", "-p", d][..]].concat())?;
        sphsfm(&[&common[..], &["export-ply", "--binary", "--out", &format!("{d}/points_bin.ply"), "-p", d][..]].concat())?;
        let read = |f: &str| fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
        outputs.push((read("reconstruction.txt")?, read("points.ply")?, read("points_bin.ply")?));
    }
    check(outputs.windows(2).all(|w| w[0] == w[1]), "outputs differ between runs")?;
    Ok(format!(
        "4 runs (threads 1, 1, 8, 8) byte-identical: reconstruction {} B, PLY {} B / {} B",
        outputs[0].0.len(),
        outputs[0].1.len(),
        outputs[0].2.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("camera model round trips", camera_model_round_trips),
        ("eight-point oracle equivalence", eight_point_oracle),
        ("RANSAC robustness", ransac_robustness),
        ("P3P resection", resection_accuracy),
        ("bundle adjustment correctness", bundle_adjustment),
        ("end-to-end reconstruction", end_to_end),
        ("engine policy conformance", policy_conformance),
        ("cubemap consistency", cubemap_consistency),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

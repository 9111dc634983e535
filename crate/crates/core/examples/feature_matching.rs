//! SIFT detection on a rendered panorama and match-graph construction over
//! planted synthetic descriptors.

use image::{Rgb, RgbImage};
use spherical_sfm::camera::ImageDims;
use spherical_sfm::features::{build_match_graph, MatchParams, PairSelectionPolicy};
use spherical_sfm::sift::{detect_features, SiftParams};
use spherical_sfm::synth::{generate, observe, Layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let img = RgbImage::from_fn(512, 256, |x, y| {
        let blob = |cx: f64, cy: f64, s: f64| (-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * s * s)).exp();
        let v = 40.0 + 200.0 * (blob(100.0, 80.0, 6.0) + blob(300.0, 150.0, 10.0) + blob(420.0, 60.0, 4.0));
        Rgb([v.min(255.0) as u8; 3])
    });
    let feats = detect_features(&img, 100, &SiftParams::default());
    for f in &feats {
        println!("keypoint ({:.1}, {:.1}) scale {:.2} orientation {:+.2}", f.pix.ix, f.pix.iy, f.scale, f.orientation);
    }

    let scene = generate(Layout::Corridor { n: 8, step: 3.0 }, 600, ImageDims::new(4096, 2048)?, 1)?
        .with_noise(0.5)
        .with_outliers(0.1);
    let obs = observe(&scene)?;
    let graph = build_match_graph(obs.images, &PairSelectionPolicy::sequential(3), &MatchParams::default())?;
    for p in &graph.pairs {
        println!("pair {}-{}: {} matches, {} inliers", p.image_a, p.image_b, p.matches.len(), p.num_inliers());
    }
    println!("{} tracks", graph.tracks.len());
    Ok(())
}

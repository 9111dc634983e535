//! Generates scenes with every layout, reconstructs them and scores them
//! against the ground truth.

use spherical_sfm::camera::ImageDims;
use spherical_sfm::engine::{run, EnginePolicy};
use spherical_sfm::features::{build_match_graph, MatchParams, PairSelectionPolicy};
use spherical_sfm::synth::{compare_reconstruction, generate, observe, Layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = ImageDims::new(5640, 2820)?;
    let cases = [
        ("ring", Layout::Ring { n: 12, radius: 10.0 }, PairSelectionPolicy::exhaustive()),
        ("corridor", Layout::Corridor { n: 12, step: 3.0 }, PairSelectionPolicy::sequential(4)),
        ("two floors", Layout::TwoFloors { n: 12 }, PairSelectionPolicy::exhaustive()),
    ];
    for (name, layout, pairs) in cases {
        let scene = generate(layout, 600, dims, 21)?.with_noise(0.5);
        let obs = observe(&scene)?;
        let graph = build_match_graph(obs.images, &pairs, &MatchParams::default())?;
        match run(&graph, &EnginePolicy::default()) {
            Ok(recon) => {
                let pts: Vec<_> = recon.points.iter().map(|p| (p.track, p.position)).collect();
                let r = compare_reconstruction(&recon.cameras(), &[], &scene)?;
                println!(
                    "{name}: {}/{} cameras, {} points, max rotation error {:.3e} deg, max center error {:.3e} (diameter {:.1})",
                    recon.registered.len(),
                    scene.poses.len(),
                    pts.len(),
                    r.max_rotation_error_deg(),
                    r.max_center_error(),
                    r.diameter
                );
            }
            Err(e) => println!("{name}: reconstruction failed: {e}"),
        }
    }
    Ok(())
}

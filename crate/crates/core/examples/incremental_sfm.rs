//! Full incremental reconstruction of a noisy corridor, with the engine's
//! decision trace.

use spherical_sfm::camera::ImageDims;
use spherical_sfm::engine::{run, EngineEvent, EnginePolicy};
use spherical_sfm::features::{build_match_graph, MatchParams, PairSelectionPolicy};
use spherical_sfm::synth::{compare_reconstruction, generate, observe, Layout};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let scene = generate(Layout::Corridor { n: 15, step: 3.0 }, 800, ImageDims::new(5640, 2820)?, 4)?.with_noise(0.8);
    let obs = observe(&scene)?;
    let graph = build_match_graph(obs.images, &PairSelectionPolicy::sequential(4), &MatchParams::default())?;
    let recon = run(&graph, &EnginePolicy::default())?;
    for e in &recon.events {
        match e {
            EngineEvent::Initialized { .. } | EngineEvent::Registered { .. } | EngineEvent::GlobalBa { .. } => println!("{e:?}"),
            _ => {}
        }
    }
    let stats = recon.stats(&graph);
    println!(
        "{}/{} registered, {} points, mean {:.3} px, rms {:.3} px",
        stats.registered, stats.total_images, stats.points, stats.mean_reproj_px, stats.rms_reproj_px
    );
    let report = compare_reconstruction(&recon.cameras(), &[], &scene)?;
    println!("max center error after similarity alignment: {:.3e}", report.max_center_error());
    Ok(())
}

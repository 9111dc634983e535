//! Writes a colored point cloud as ASCII and binary PLY and reads both back.

use nalgebra::Vector3;
use spherical_sfm::io::{read_ply, write_ply};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let points: Vec<(Vector3<f64>, [u8; 3])> = (0..200)
        .map(|i| {
            let t = i as f64 * 0.1;
            (Vector3::new(t.cos() * 3.0, t * 0.05, t.sin() * 3.0), [(i % 256) as u8, 128, (255 - i % 256) as u8])
        })
        .collect();
    let dir = std::env::temp_dir();
    let (ascii, binary) = (dir.join("sphsfm_example_ascii.ply"), dir.join("sphsfm_example_binary.ply"));
    write_ply(&ascii, &points, false)?;
    write_ply(&binary, &points, true)?;
    let (a, b) = (read_ply(&ascii)?, read_ply(&binary)?);
    println!("{} and {} vertices read back, identical: {}", a.len(), b.len(), a == b);
    println!("sizes: ascii {} bytes, binary {} bytes", std::fs::metadata(&ascii)?.len(), std::fs::metadata(&binary)?.len());
    Ok(())
}

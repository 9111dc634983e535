//! Text and binary file formats, image loading and project configuration.
//!
//! Every text writer emits floats with 17 significant digits (descriptors with
//! 9), so reading a file and writing it back reproduces it byte for byte.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::camera::{ImageDims, PixelCoord, Pose};
use crate::cubemap::canonical_quaternion;
use crate::engine::{ReconPoint, Reconstruction};
use crate::features::{Feature, MatchGraph, MatchPair, TrackState};
use crate::synth::{image_name, SyntheticScene};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("no images in {0}")]
    NoImages(PathBuf),
    #[error("reconstruction has no points")]
    EmptyReconstruction,
    #[error("unknown image name {0}")]
    UnknownImage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, IoError>;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, data: &[u8]) -> Result<()> {
    fs::write(path, data).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Line cursor producing parse errors that carry the file and line number.
struct Lines<'a> {
    path: &'a Path,
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        Lines {
            path,
            iter: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> IoError {
        IoError::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    /// Next non-empty line split into whitespace tokens.
    fn next_tokens(&mut self) -> Option<Vec<&'a str>> {
        for (i, l) in self.iter.by_ref() {
            self.line = i + 1;
            let t: Vec<&str> = l.split_whitespace().collect();
            if !t.is_empty() {
                return Some(t);
            }
        }
        None
    }

    fn expect_tokens(&mut self, what: &str) -> Result<Vec<&'a str>> {
        self.next_tokens().ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))
    }

    fn header(&mut self, keyword: &str, min_fields: usize) -> Result<Vec<&'a str>> {
        let t = self.expect_tokens(keyword)?;
        if t[0] != keyword || t.len() < min_fields + 1 {
            return Err(self.err(format!("expected `{keyword}` header")));
        }
        Ok(t)
    }

    fn parse<T: FromStr>(&self, tok: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(format!("cannot parse `{tok}`")))
    }
}

/// Per-image feature file: `FEATS <count> <dim>` then `ix iy scale orientation d_1 .. d_D`.
pub fn features_to_string(features: &[Feature]) -> String {
    let dim = features.first().map_or(0, |f| f.descriptor.len());
    let mut s = format!("FEATS {} {}\n", features.len(), dim);
    for f in features {
        write!(s, "{:.16e} {:.16e} {:.16e} {:.16e}", f.pix.ix, f.pix.iy, f.scale, f.orientation).unwrap();
        for d in &f.descriptor {
            write!(s, " {d:.8e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_features(path: &Path, text: &str) -> Result<Vec<Feature>> {
    let mut lines = Lines::new(path, text);
    let h = lines.header("FEATS", 2)?;
    let (n, dim): (usize, usize) = (lines.parse(h[1])?, lines.parse(h[2])?);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = lines.expect_tokens("feature line")?;
        if t.len() != 4 + dim {
            return Err(lines.err(format!("expected {} fields, got {}", 4 + dim, t.len())));
        }
        let descriptor = t[4..].iter().map(|v| lines.parse::<f32>(v)).collect::<Result<Vec<f32>>>()?;
        out.push(Feature {
            pix: PixelCoord::new(lines.parse(t[0])?, lines.parse(t[1])?),
            scale: lines.parse(t[2])?,
            orientation: lines.parse(t[3])?,
            descriptor,
        });
    }
    Ok(out)
}

pub fn write_features(path: &Path, features: &[Feature]) -> Result<()> {
    write_bytes(path, features_to_string(features).as_bytes())
}

pub fn read_features(path: &Path) -> Result<Vec<Feature>> {
    parse_features(path, &read_text(path)?)
}

/// Image list: one `name width height` line per image.
pub fn image_list_to_string(images: &[(String, ImageDims)]) -> String {
    images.iter().map(|(n, d)| format!("{n} {} {}\n", d.width, d.height)).collect()
}

pub fn read_image_list(path: &Path) -> Result<Vec<(String, ImageDims)>> {
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let mut out = Vec::new();
    while let Some(t) = lines.next_tokens() {
        if t.len() != 3 {
            return Err(lines.err("expected `name width height`"));
        }
        let dims = ImageDims::new(lines.parse(t[1])?, lines.parse(t[2])?).map_err(|e| lines.err(e.to_string()))?;
        out.push((t[0].to_string(), dims));
    }
    Ok(out)
}

/// Match file: `PAIR a b count`, index lines, then `INLIERS` and `E` for verified pairs.
pub fn matches_to_string(names: &[String], pairs: &[MatchPair]) -> String {
    let mut s = String::new();
    for p in pairs {
        writeln!(s, "PAIR {} {} {}", names[p.image_a], names[p.image_b], p.matches.len()).unwrap();
        for (a, b) in &p.matches {
            writeln!(s, "{a} {b}").unwrap();
        }
        if p.verified {
            let bits: String = p.inlier_mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
            writeln!(s, "INLIERS {bits}").unwrap();
            if let Some(e) = &p.essential {
                s.push('E');
                for r in 0..3 {
                    for c in 0..3 {
                        write!(s, " {:.16e}", e[(r, c)]).unwrap();
                    }
                }
                s.push('\n');
            }
        }
    }
    s
}

pub fn parse_matches(path: &Path, text: &str, names: &[String]) -> Result<Vec<MatchPair>> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut lines = Lines::new(path, text);
    let mut pairs: Vec<MatchPair> = Vec::new();
    while let Some(t) = lines.next_tokens() {
        match t[0] {
            "PAIR" if t.len() == 4 => {
                let a = *index.get(t[1]).ok_or_else(|| IoError::UnknownImage(t[1].into()))?;
                let b = *index.get(t[2]).ok_or_else(|| IoError::UnknownImage(t[2].into()))?;
                let n: usize = lines.parse(t[3])?;
                let mut matches = Vec::with_capacity(n);
                for _ in 0..n {
                    let m = lines.expect_tokens("match line")?;
                    if m.len() != 2 {
                        return Err(lines.err("expected `idx_a idx_b`"));
                    }
                    matches.push((lines.parse(m[0])?, lines.parse(m[1])?));
                }
                pairs.push(MatchPair::new(a, b, matches));
            }
            "INLIERS" if t.len() == 2 => {
                let pair = pairs.last_mut().ok_or_else(|| lines.err("INLIERS before PAIR"))?;
                if t[1].len() != pair.matches.len() {
                    return Err(lines.err("inlier mask length differs from match count"));
                }
                pair.inlier_mask = t[1].chars().map(|c| c == '1').collect();
                pair.verified = true;
            }
            "E" if t.len() == 10 => {
                let vals = t[1..].iter().map(|v| lines.parse::<f64>(v)).collect::<Result<Vec<f64>>>()?;
                let pair = pairs.last_mut().ok_or_else(|| lines.err("E before PAIR"))?;
                pair.essential = Some(Matrix3::from_row_slice(&vals));
            }
            _ => return Err(lines.err(format!("unexpected line starting with `{}`", t[0]))),
        }
    }
    for p in &mut pairs {
        if !p.verified {
            p.inlier_mask = vec![false; p.matches.len()];
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileCamera {
    pub name: String,
    pub dims: ImageDims,
    /// `(w, x, y, z)` of the world-to-camera rotation.
    pub quaternion: [f64; 4],
    pub translation: Vector3<f64>,
}

impl FileCamera {
    pub fn from_pose(name: &str, dims: ImageDims, pose: &Pose) -> Self {
        FileCamera {
            name: name.to_string(),
            dims,
            quaternion: canonical_quaternion(&pose.rotation),
            translation: pose.translation,
        }
    }

    pub fn pose(&self) -> Pose {
        let [w, x, y, z] = self.quaternion;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        Pose::new(q.to_rotation_matrix(), self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilePoint {
    pub position: Vector3<f64>,
    pub color: [u8; 3],
    pub track: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileObservation {
    pub track: usize,
    pub image: String,
    pub feature: usize,
    pub pix: PixelCoord,
}

/// On-disk reconstruction: cameras, points and observations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconstructionFile {
    pub cameras: Vec<FileCamera>,
    pub points: Vec<FilePoint>,
    pub observations: Vec<FileObservation>,
}

impl ReconstructionFile {
    pub fn from_reconstruction(recon: &Reconstruction, graph: &MatchGraph) -> Self {
        let cameras = recon
            .registered
            .iter()
            .map(|(&i, p)| FileCamera::from_pose(&graph.images[i].name, graph.images[i].dims, p))
            .collect();
        let points = recon
            .points
            .iter()
            .map(|p| FilePoint {
                position: p.position,
                color: p.color,
                track: p.track,
            })
            .collect();
        let observations = recon
            .points
            .iter()
            .flat_map(|p| {
                p.observations.iter().map(move |&(img, f)| FileObservation {
                    track: p.track,
                    image: graph.images[img].name.clone(),
                    feature: f,
                    pix: graph.images[img].features[f].pix,
                })
            })
            .collect();
        ReconstructionFile {
            cameras,
            points,
            observations,
        }
    }

    /// Rebuilds an engine reconstruction with image indices taken from `names`.
    pub fn to_reconstruction(&self, names: &[String]) -> Result<Reconstruction> {
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let lookup = |n: &str| index.get(n).copied().ok_or_else(|| IoError::UnknownImage(n.to_string()));
        let mut recon = Reconstruction::default();
        for c in &self.cameras {
            let i = lookup(&c.name)?;
            recon.registered.insert(i, c.pose());
            recon.registration_order.push(i);
        }
        let max_track = self.points.iter().map(|p| p.track + 1).max().unwrap_or(0);
        recon.track_states = vec![TrackState::Unreconstructed; max_track];
        let mut by_track = HashMap::new();
        for (k, p) in self.points.iter().enumerate() {
            by_track.insert(p.track, k);
            recon.track_states[p.track] = TrackState::Reconstructed(k);
            recon.points.push(ReconPoint {
                position: p.position,
                color: p.color,
                track: p.track,
                observations: Vec::new(),
            });
        }
        for o in &self.observations {
            if let Some(&k) = by_track.get(&o.track) {
                recon.points[k].observations.push((lookup(&o.image)?, o.feature));
            }
        }
        Ok(recon)
    }

    pub fn camera_names(&self) -> Vec<String> {
        self.cameras.iter().map(|c| c.name.clone()).collect()
    }
}

impl std::fmt::Display for ReconstructionFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "CAMERAS {}", self.cameras.len())?;
        for c in &self.cameras {
            let [w, x, y, z] = c.quaternion;
            let t = c.translation;
            writeln!(
                f,
                "{} {} {} {w:.16e} {x:.16e} {y:.16e} {z:.16e} {:.16e} {:.16e} {:.16e}",
                c.name, c.dims.width, c.dims.height, t.x, t.y, t.z
            )?;
        }
        writeln!(f, "POINTS {}", self.points.len())?;
        for p in &self.points {
            let v = p.position;
            writeln!(f, "{:.16e} {:.16e} {:.16e} {} {} {} {}", v.x, v.y, v.z, p.color[0], p.color[1], p.color[2], p.track)?;
        }
        writeln!(f, "OBS {}", self.observations.len())?;
        for o in &self.observations {
            writeln!(f, "{} {} {} {:.16e} {:.16e}", o.track, o.image, o.feature, o.pix.ix, o.pix.iy)?;
        }
        Ok(())
    }
}

fn parse_recon_sections(lines: &mut Lines) -> Result<ReconstructionFile> {
    let h = lines.header("CAMERAS", 1)?;
    let n: usize = lines.parse(h[1])?;
    let mut cameras = Vec::with_capacity(n);
    for _ in 0..n {
        let t = lines.expect_tokens("camera line")?;
        if t.len() != 10 {
            return Err(lines.err("expected `name W H qw qx qy qz tx ty tz`"));
        }
        let v = t[3..].iter().map(|x| lines.parse::<f64>(x)).collect::<Result<Vec<f64>>>()?;
        let dims = ImageDims::new(lines.parse(t[1])?, lines.parse(t[2])?).map_err(|e| lines.err(e.to_string()))?;
        cameras.push(FileCamera {
            name: t[0].to_string(),
            dims,
            quaternion: [v[0], v[1], v[2], v[3]],
            translation: Vector3::new(v[4], v[5], v[6]),
        });
    }
    let h = lines.header("POINTS", 1)?;
    let n: usize = lines.parse(h[1])?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let t = lines.expect_tokens("point line")?;
        if t.len() != 7 {
            return Err(lines.err("expected `x y z r g b track_id`"));
        }
        points.push(FilePoint {
            position: Vector3::new(lines.parse(t[0])?, lines.parse(t[1])?, lines.parse(t[2])?),
            color: [lines.parse(t[3])?, lines.parse(t[4])?, lines.parse(t[5])?],
            track: lines.parse(t[6])?,
        });
    }
    let h = lines.header("OBS", 1)?;
    let n: usize = lines.parse(h[1])?;
    let mut observations = Vec::with_capacity(n);
    for _ in 0..n {
        let t = lines.expect_tokens("observation line")?;
        if t.len() != 5 {
            return Err(lines.err("expected `track_id image feature ix iy`"));
        }
        observations.push(FileObservation {
            track: lines.parse(t[0])?,
            image: t[1].to_string(),
            feature: lines.parse(t[2])?,
            pix: PixelCoord::new(lines.parse(t[3])?, lines.parse(t[4])?),
        });
    }
    Ok(ReconstructionFile {
        cameras,
        points,
        observations,
    })
}

pub fn parse_reconstruction(path: &Path, text: &str) -> Result<ReconstructionFile> {
    let mut lines = Lines::new(path, text);
    let r = parse_recon_sections(&mut lines)?;
    if lines.next_tokens().is_some() {
        return Err(lines.err("trailing content after OBS section"));
    }
    Ok(r)
}

pub fn read_reconstruction(path: &Path) -> Result<ReconstructionFile> {
    parse_reconstruction(path, &read_text(path)?)
}

pub fn write_reconstruction(path: &Path, recon: &ReconstructionFile) -> Result<()> {
    write_bytes(path, recon.to_string().as_bytes())
}

/// Scene dump: the ground truth in reconstruction format followed by
/// `TRUTH W H noise_px outlier_rate seed descriptor_dim max_range|none`.
pub fn scene_to_string(scene: &SyntheticScene) -> String {
    let file = ReconstructionFile {
        cameras: scene
            .poses
            .iter()
            .enumerate()
            .map(|(i, p)| FileCamera::from_pose(&image_name(i), scene.dims, p))
            .collect(),
        points: scene
            .points
            .iter()
            .zip(&scene.colors)
            .enumerate()
            .map(|(i, (p, c))| FilePoint {
                position: *p,
                color: *c,
                track: i,
            })
            .collect(),
        observations: Vec::new(),
    };
    let range = scene.max_range.map_or("none".to_string(), |r| format!("{r:.16e}"));
    format!(
        "{file}TRUTH {} {} {:.16e} {:.16e} {} {} {range}\n",
        scene.dims.width, scene.dims.height, scene.noise_px, scene.outlier_rate, scene.rng_seed, scene.descriptor_dim
    )
}

pub fn parse_scene(path: &Path, text: &str) -> Result<SyntheticScene> {
    let mut lines = Lines::new(path, text);
    let file = parse_recon_sections(&mut lines)?;
    let t = lines.header("TRUTH", 7)?;
    let dims = ImageDims::new(lines.parse(t[1])?, lines.parse(t[2])?).map_err(|e| lines.err(e.to_string()))?;
    let max_range = match t[7] {
        "none" => None,
        v => Some(lines.parse(v)?),
    };
    Ok(SyntheticScene {
        poses: file.cameras.iter().map(FileCamera::pose).collect(),
        points: file.points.iter().map(|p| p.position).collect(),
        colors: file.points.iter().map(|p| p.color).collect(),
        dims,
        noise_px: lines.parse(t[3])?,
        outlier_rate: lines.parse(t[4])?,
        rng_seed: lines.parse(t[5])?,
        descriptor_dim: lines.parse(t[6])?,
        max_range,
    })
}

pub fn read_scene(path: &Path) -> Result<SyntheticScene> {
    parse_scene(path, &read_text(path)?)
}

/// Human-readable summary: totals, residual statistics and a per-image table.
pub fn report_to_string(recon: &Reconstruction, graph: &MatchGraph) -> String {
    let st = recon.stats(graph);
    let mut s = String::new();
    writeln!(s, "registered {}/{}", st.registered, st.total_images).unwrap();
    writeln!(s, "points {}", st.points).unwrap();
    writeln!(s, "observations {}", st.observations).unwrap();
    writeln!(s, "mean_reprojection_px {:.6}", st.mean_reproj_px).unwrap();
    writeln!(s, "rms_reprojection_px {:.6}", st.rms_reproj_px).unwrap();
    let unregistered: Vec<&str> = recon.unregistered(graph).iter().map(|&i| graph.images[i].name.as_str()).collect();
    writeln!(s, "unregistered {}", if unregistered.is_empty() { "-".to_string() } else { unregistered.join(" ") }).unwrap();
    writeln!(s, "image features observations mean_px").unwrap();
    let per: BTreeMap<usize, (usize, f64)> = st.per_image.iter().map(|r| (r.image, (r.observations, r.mean_px))).collect();
    for &i in recon.registered.keys() {
        let (n, m) = per.get(&i).copied().unwrap_or((0, 0.0));
        writeln!(s, "{} {} {} {:.6}", graph.images[i].name, graph.images[i].features.len(), n, m).unwrap();
    }
    s
}

/// PLY export with float32 coordinates and uint8 colors.
pub fn ply_bytes(points: &[(Vector3<f64>, [u8; 3])], binary: bool) -> Result<Vec<u8>> {
    if points.is_empty() {
        return Err(IoError::EmptyReconstruction);
    }
    if points.iter().any(|(p, _)| !p.iter().all(|v| v.is_finite())) {
        return Err(IoError::Config("non-finite point coordinates".into()));
    }
    let format = if binary { "binary_little_endian" } else { "ascii" };
    let mut out = format!(
        "ply\nformat {format} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        points.len()
    )
    .into_bytes();
    for (p, c) in points {
        if binary {
            for v in p.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            out.extend_from_slice(c);
        } else {
            out.extend_from_slice(format!("{} {} {} {} {} {}\n", p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]).as_bytes());
        }
    }
    Ok(out)
}

pub fn write_ply(path: &Path, points: &[(Vector3<f64>, [u8; 3])], binary: bool) -> Result<()> {
    let bytes = ply_bytes(points, binary)?;
    write_bytes(path, &bytes)
}

/// Reads the vertex layout written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<(Vector3<f32>, [u8; 3])>> {
    let data = fs::read(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let err = |msg: &str| IoError::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    let end = b"end_header\n";
    let pos = data.windows(end.len()).position(|w| w == end).ok_or_else(|| err("missing end_header"))?;
    let header = std::str::from_utf8(&data[..pos]).map_err(|_| err("header is not text"))?;
    let body = &data[pos + end.len()..];
    let mut binary = None;
    let mut count = None;
    for l in header.lines() {
        let t: Vec<&str> = l.split_whitespace().collect();
        match t.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["element", "vertex", n] => count = n.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (binary, count) = (binary.ok_or_else(|| err("unknown format"))?, count.ok_or_else(|| err("missing vertex count"))?);
    let mut out = Vec::with_capacity(count);
    if binary {
        if body.len() < count * 15 {
            return Err(err("truncated vertex data"));
        }
        for k in 0..count {
            let r = &body[k * 15..(k + 1) * 15];
            let f = |i: usize| f32::from_le_bytes([r[i], r[i + 1], r[i + 2], r[i + 3]]);
            out.push((Vector3::new(f(0), f(4), f(8)), [r[12], r[13], r[14]]));
        }
    } else {
        let text = std::str::from_utf8(body).map_err(|_| err("body is not text"))?;
        for l in text.lines().filter(|l| !l.trim().is_empty()).take(count) {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 6 {
                return Err(err("expected 6 vertex fields"));
            }
            let f = |i: usize| t[i].parse::<f32>().map_err(|_| err("bad float"));
            let u = |i: usize| t[i].parse::<u8>().map_err(|_| err("bad color"));
            out.push((Vector3::new(f(0)?, f(1)?, f(2)?), [u(3)?, u(4)?, u(5)?]));
        }
        if out.len() != count {
            return Err(err("truncated vertex data"));
        }
    }
    Ok(out)
}

/// `name x y z` lines.
pub fn read_positions(path: &Path) -> Result<HashMap<String, Vector3<f64>>> {
    let text = read_text(path)?;
    let mut lines = Lines::new(path, &text);
    let mut out = HashMap::new();
    while let Some(t) = lines.next_tokens() {
        if t.len() != 4 {
            return Err(lines.err("expected `name x y z`"));
        }
        out.insert(t[0].to_string(), Vector3::new(lines.parse(t[1])?, lines.parse(t[2])?, lines.parse(t[3])?));
    }
    Ok(out)
}

pub fn positions_to_string(entries: &[(String, Vector3<f64>)]) -> String {
    entries
        .iter()
        .map(|(n, p)| format!("{n} {:.16e} {:.16e} {:.16e}\n", p.x, p.y, p.z))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub name: String,
    pub dims: ImageDims,
    pub raster: RgbImage,
    pub gnss: Option<Vector3<f64>>,
    /// Aspect ratio deviates from 2:1 by more than 1%.
    pub non_erp: bool,
}

pub fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

pub fn aspect_ok(dims: ImageDims) -> bool {
    let ratio = dims.w() / dims.h();
    (ratio / 2.0 - 1.0).abs() <= 0.01
}

/// Decodes every PNG/JPEG in `dir` (sorted by file name), attaching positions
/// from `positions.txt` when present. Undecodable files are skipped with a
/// warning; non-2:1 images are skipped unless `allow_non_erp`.
pub fn load_images(dir: &Path, allow_non_erp: bool) -> Result<Vec<LoadedImage>> {
    let entries = fs::read_dir(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && is_image_file(p)).collect();
    files.sort();
    let positions_path = dir.join("positions.txt");
    let positions = if positions_path.exists() { read_positions(&positions_path)? } else { HashMap::new() };
    let decoded: Vec<Option<LoadedImage>> = files
        .par_iter()
        .map(|path| {
            let name = path.file_name()?.to_string_lossy().to_string();
            let raster = match image::open(path) {
                Ok(img) => img.to_rgb8(),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    return None;
                }
            };
            let dims = ImageDims::new(raster.width(), raster.height()).ok()?;
            let non_erp = !aspect_ok(dims);
            let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            let gnss = positions.get(&name).or_else(|| positions.get(&stem)).copied();
            Some(LoadedImage {
                name,
                dims,
                raster,
                gnss,
                non_erp,
            })
        })
        .collect();
    let mut out = Vec::new();
    for img in decoded.into_iter().flatten() {
        if img.non_erp {
            log::warn!("{} is {}x{}, not 2:1 equirectangular", img.name, img.dims.width, img.dims.height);
            if !allow_non_erp {
                continue;
            }
        }
        out.push(img);
    }
    if out.is_empty() {
        return Err(IoError::NoImages(dir.to_path_buf()));
    }
    Ok(out)
}

/// Project configuration (TOML). Every field is optional; command-line flags
/// take precedence.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub image_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub no_erp_check: Option<bool>,
    #[serde(default)]
    pub pairs: PairsConfig,
    #[serde(default)]
    pub features: FeaturesConfig,
    #[serde(default)]
    pub ransac: RansacConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default)]
    pub cubemap: CubemapConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsConfig {
    pub exhaustive: Option<bool>,
    pub sequential: Option<usize>,
    pub spatial: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    pub max_features: Option<usize>,
    pub ratio: Option<f64>,
    pub max_distance: Option<f64>,
    pub min_pair_inliers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub e_p: Option<f64>,
    pub max_iterations: Option<usize>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub seed_min_inliers: Option<usize>,
    pub seed_min_tri_angle_deg: Option<f64>,
    pub min_obs_for_registration: Option<usize>,
    pub local_ba_window: Option<usize>,
    pub global_ba_growth: Option<f64>,
    pub max_reproj_px: Option<f64>,
    pub min_tri_angle_point_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CubemapConfig {
    pub face_size: Option<u32>,
    pub bicubic: Option<bool>,
}

impl ProjectConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ProjectConfig = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("pairs.spatial", self.pairs.spatial),
            ("features.ratio", self.features.ratio),
            ("features.max_distance", self.features.max_distance),
            ("ransac.e_p", self.ransac.e_p),
            ("ransac.confidence", self.ransac.confidence),
            ("engine.seed_min_tri_angle_deg", self.engine.seed_min_tri_angle_deg),
            ("engine.global_ba_growth", self.engine.global_ba_growth),
            ("engine.max_reproj_px", self.engine.max_reproj_px),
            ("engine.min_tri_angle_point_deg", self.engine.min_tri_angle_point_deg),
        ];
        for (name, v) in positive {
            if let Some(v) = v {
                if !(v > 0.0) {
                    return Err(IoError::Config(format!("{name} must be positive")));
                }
            }
        }
        let counts = [
            ("threads", self.threads),
            ("pairs.sequential", self.pairs.sequential),
            ("features.max_features", self.features.max_features),
            ("engine.local_ba_window", self.engine.local_ba_window),
        ];
        for (name, v) in counts {
            if v == Some(0) {
                return Err(IoError::Config(format!("{name} must be at least 1")));
            }
        }
        if let Some(dir) = &self.image_dir {
            if !dir.exists() {
                return Err(IoError::Config(format!("image_dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, observe, Layout};

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn features_round_trip() {
        let s = generate(Layout::Ring { n: 2, radius: 3.0 }, 20, ImageDims::new(200, 100).unwrap(), 1).unwrap();
        let obs = observe(&s.with_noise(0.7)).unwrap();
        let text = features_to_string(&obs.images[0].features);
        let back = parse_features(p(), &text).unwrap();
        assert_eq!(back, obs.images[0].features);
        assert_eq!(features_to_string(&back), text);
    }

    #[test]
    fn matches_round_trip() {
        let s = generate(Layout::Ring { n: 3, radius: 3.0 }, 20, ImageDims::new(200, 100).unwrap(), 2).unwrap();
        let g = observe(&s).unwrap().true_graph(&s);
        let names: Vec<String> = g.images.iter().map(|i| i.name.clone()).collect();
        let mut pairs = g.pairs.clone();
        pairs.push(MatchPair {
            inlier_mask: vec![false; 2],
            ..MatchPair::new(0, 2, vec![(1, 2), (3, 4)])
        });
        let text = matches_to_string(&names, &pairs);
        let back = parse_matches(p(), &text, &names).unwrap();
        assert_eq!(back, pairs);
        assert_eq!(matches_to_string(&names, &back), text);
    }

    #[test]
    fn scene_round_trip() {
        let s = generate(Layout::Corridor { n: 3, step: 2.0 }, 12, ImageDims::new(200, 100).unwrap(), 3)
            .unwrap()
            .with_noise(0.5);
        let text = scene_to_string(&s);
        let back = parse_scene(p(), &text).unwrap();
        assert_eq!(scene_to_string(&back), text);
        assert_eq!(back.points, s.points);
        for (a, b) in back.poses.iter().zip(&s.poses) {
            assert!(crate::camera::rotation_angle(&a.rotation, &b.rotation) < 1e-14);
        }
    }

    #[test]
    fn reconstruction_round_trip() {
        let text = "CAMERAS 1\na 20 10 1 0 0 0 1.5 0 0\nPOINTS 1\n1 2 3 4 5 6 0\nOBS 1\n0 a 3 1.25 2.5\n";
        let f = parse_reconstruction(p(), text).unwrap();
        let again = f.to_string();
        assert_eq!(parse_reconstruction(p(), &again).unwrap(), f);
        assert_eq!(parse_reconstruction(p(), &again).unwrap().to_string(), again);
        let recon = f.to_reconstruction(&["a".to_string()]).unwrap();
        assert_eq!(recon.points[0].observations, vec![(0, 3)]);
        assert!(parse_reconstruction(p(), "CAMERAS 2\na 20 10 1 0 0 0 0 0 0\n").is_err());
    }

    #[test]
    fn ply_formats() {
        let pts = vec![
            (Vector3::new(1.0, 2.0, 3.0), [1, 2, 3]),
            (Vector3::new(-0.1, 1e-3, 7.25), [255, 0, 9]),
            (Vector3::new(1e6, -2.5, 0.333), [4, 5, 6]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ply"), dir.path().join("b.ply"));
        write_ply(&a, &pts, false).unwrap();
        write_ply(&b, &pts, true).unwrap();
        let text = fs::read_to_string(&a).unwrap();
        assert!(text.contains("element vertex 3"));
        let (ra, rb) = (read_ply(&a).unwrap(), read_ply(&b).unwrap());
        assert_eq!(ra, rb);
        for ((p, c), (q, d)) in pts.iter().zip(&ra) {
            assert_eq!(p.map(|v| v as f32), *q);
            assert_eq!(c, d);
        }
        let empty = dir.path().join("e.ply");
        assert!(write_ply(&empty, &[], false).is_err());
        assert!(!empty.exists());
    }

    #[test]
    fn image_loading_and_aspect() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(200, 100).save(dir.path().join("a.png")).unwrap();
        RgbImage::new(100, 80).save(dir.path().join("b.png")).unwrap();
        fs::write(dir.path().join("c.png"), b"not an image").unwrap();
        fs::write(dir.path().join("positions.txt"), "a.png 1 2 3\n").unwrap();
        let imgs = load_images(dir.path(), false).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].gnss, Some(Vector3::new(1.0, 2.0, 3.0)));
        assert_eq!(load_images(dir.path(), true).unwrap().len(), 2);
        assert!(aspect_ok(ImageDims::new(5640, 2820).unwrap()));
        assert!(aspect_ok(ImageDims::new(5400, 2700).unwrap()));
        assert!(!aspect_ok(ImageDims::new(1000, 800).unwrap()));
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_images(empty.path(), false), Err(IoError::NoImages(_))));
    }

    #[test]
    fn config_parsing() {
        let cfg = ProjectConfig::parse("seed = 3\n[pairs]\nsequential = 2\n[engine]\nseed_min_inliers = 50\n").unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.pairs.sequential, Some(2));
        assert_eq!(cfg.engine.seed_min_inliers, Some(50));
        assert!(ProjectConfig::parse("bogus = 1\n").is_err());
        assert!(ProjectConfig::parse("[ransac]\ne_p = -1.0\n").is_err());
    }
}

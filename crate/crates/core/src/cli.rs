//! `sphsfm` command line: synth, match, sfm, cubemap, eval and export-ply.
//!
//! Stages exchange data only through files in a project directory:
//!
//! | file                  | written by        |
//! |-----------------------|-------------------|
//! | `images.txt`          | synth, match      |
//! | `features/<name>.txt` | synth, match      |
//! | `positions.txt`       | synth             |
//! | `images/<name>.png`   | synth `--render`  |
//! | `scene.txt`           | synth             |
//! | `matches.txt`         | match             |
//! | `reconstruction.txt`  | sfm               |
//! | `report.txt`          | sfm               |
//! | `cubemap/`            | cubemap           |
//! | `points.ply`          | export-ply        |

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{Rgb, RgbImage};
use nalgebra::Vector3;
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::ImageDims;
use crate::cubemap::{export_for_mvs, CubemapError, ErpImage, Interpolation, DEFAULT_FACE_SIZE};
use crate::engine::{self, EngineError, EnginePolicy, Reconstruction};
use crate::features::{build_match_graph, GraphImage, MatchError, MatchGraph, MatchParams, PairSelectionPolicy};
use crate::io::{self, IoError, ProjectConfig, ReconstructionFile};
use crate::sift::{detect_features, SiftParams};
use crate::synth::{self, compare_reconstruction, generate, observe, Layout, SynthError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

const DEFAULT_MAX_FEATURES: usize = 8000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Cubemap(#[from] CubemapError),
    #[error("{0}")]
    Pipeline(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sphsfm", version, about = "Structure from motion for equirectangular panoramas")]
pub struct Cli {
    /// Seed for every random decision in the pipeline.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (1 runs everything on the calling thread).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML project configuration; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with planted features.
    Synth(SynthArgs),
    /// Detect or import features and build the verified match graph.
    Match(MatchArgs),
    /// Run incremental reconstruction.
    Sfm(SfmArgs),
    /// Export cube faces and pinhole cameras for dense matching.
    Cubemap(CubemapArgs),
    /// Compare a reconstruction against the synthetic truth.
    Eval(ProjectArgs),
    /// Write the sparse points as PLY.
    ExportPly(PlyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutKind {
    Ring,
    Corridor,
    TwoFloors,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Project directory.
    #[arg(short, long)]
    pub project: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub project: ProjectArgs,
    #[arg(long, value_enum, default_value = "ring")]
    pub layout: LayoutKind,
    #[arg(long, default_value_t = 20)]
    pub cameras: usize,
    #[arg(long, default_value_t = 500)]
    pub points: usize,
    /// Ring radius or corridor step.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// Gaussian pixel noise (standard deviation).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Fraction of observations replaced by random pixels.
    #[arg(long, default_value_t = 0.0)]
    pub outliers: f64,
    #[arg(long, default_value_t = 5640)]
    pub width: u32,
    #[arg(long, default_value_t = 2820)]
    pub height: u32,
    /// Also write panorama rasters with the points drawn in.
    #[arg(long)]
    pub render: bool,
}

#[derive(Debug, Args, Clone, Default)]
pub struct PairArgs {
    /// Match every image pair.
    #[arg(long)]
    pub exhaustive: bool,
    /// Match each image with the next K.
    #[arg(long, value_name = "K")]
    pub sequential: Option<usize>,
    /// Match images whose positions are within D.
    #[arg(long, value_name = "D")]
    pub spatial: Option<f64>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub project: ProjectArgs,
    /// Raster directory (default `<project>/images`).
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[command(flatten)]
    pub pairs: PairArgs,
    #[arg(long)]
    pub max_features: Option<usize>,
    /// Accept rasters that are not 2:1.
    #[arg(long)]
    pub no_erp_check: bool,
    /// Run detection even when feature files exist.
    #[arg(long)]
    pub detect: bool,
}

#[derive(Debug, Args)]
pub struct SfmArgs {
    #[command(flatten)]
    pub matching: MatchArgs,
}

#[derive(Debug, Args)]
pub struct CubemapArgs {
    #[command(flatten)]
    pub project: ProjectArgs,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub face_size: Option<u32>,
    #[arg(long)]
    pub bicubic: bool,
    /// Output directory (default `<project>/cubemap`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlyArgs {
    #[command(flatten)]
    pub project: ProjectArgs,
    #[arg(long)]
    pub binary: bool,
    /// Output file (default `<project>/points.ply`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command inside a thread pool sized by `--threads`.
pub fn execute(cli: Cli) -> Result<String, CliError> {
    let config = match &cli.config {
        Some(path) => ProjectConfig::load(path).map_err(|e| CliError::Usage(e.to_string()))?,
        None => ProjectConfig::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
    };
    let threads = cli.threads.or(ctx.config.threads).unwrap_or(0);
    if cli.threads == Some(0) {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Match(a) => cmd_match(&ctx, a).map(|g| format!("{} verified pairs, {} tracks", g.verified_pairs().count(), g.tracks.len())),
        Command::Sfm(a) => cmd_sfm(&ctx, a),
        Command::Cubemap(a) => cmd_cubemap(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::ExportPly(a) => cmd_ply(&ctx, a),
    })
}

struct Context {
    seed: u64,
    config: ProjectConfig,
}

impl Context {
    fn project(&self, args: &ProjectArgs) -> PathBuf {
        args.project
            .clone()
            .or_else(|| self.config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn image_dir(&self, project: &Path, flag: &Option<PathBuf>) -> PathBuf {
        flag.clone()
            .or_else(|| self.config.image_dir.clone())
            .unwrap_or_else(|| project.join("images"))
    }

    fn pair_policy(&self, flags: &PairArgs, project: &Path, names: &[String]) -> Result<PairSelectionPolicy, CliError> {
        let cfg = &self.config.pairs;
        let flagged = flags.exhaustive || flags.sequential.is_some() || flags.spatial.is_some();
        let (exhaustive, sequential, spatial) = if flagged {
            (flags.exhaustive, flags.sequential, flags.spatial)
        } else {
            (cfg.exhaustive.unwrap_or(false), cfg.sequential, cfg.spatial)
        };
        if sequential == Some(0) {
            return Err(CliError::Usage("--sequential must be at least 1".into()));
        }
        let mut policy = PairSelectionPolicy {
            exhaustive,
            sequential,
            spatial,
            positions: None,
        };
        if spatial.is_some() {
            let positions = io::read_positions(&project.join("positions.txt"))?;
            policy.positions = Some(names
                .iter()
                .map(|n| {
                    positions
                        .get(n)
                        .or_else(|| positions.get(stem(n)))
                        .copied()
                        .ok_or_else(|| CliError::Pipeline(format!("no position for {n}")))
                })
                .collect::<Result<_, CliError>>()?);
        }
        Ok(policy)
    }

    fn match_params(&self) -> MatchParams {
        let mut p = MatchParams::default();
        let f = &self.config.features;
        p.ratio = f.ratio.unwrap_or(p.ratio);
        p.max_distance = f.max_distance.unwrap_or(p.max_distance);
        p.verify.min_pair_inliers = f.min_pair_inliers.unwrap_or(p.verify.min_pair_inliers);
        self.apply_ransac(&mut p.verify.ransac);
        p
    }

    fn apply_ransac(&self, r: &mut crate::two_view::RansacParams) {
        let c = &self.config.ransac;
        r.e_p = c.e_p.unwrap_or(r.e_p);
        r.max_iterations = c.max_iterations.unwrap_or(r.max_iterations);
        r.confidence = c.confidence.unwrap_or(r.confidence);
        r.rng_seed = self.seed;
    }

    fn engine_policy(&self) -> EnginePolicy {
        let mut p = EnginePolicy::default();
        let e = &self.config.engine;
        p.seed_min_inliers = e.seed_min_inliers.unwrap_or(p.seed_min_inliers);
        p.seed_min_tri_angle_deg = e.seed_min_tri_angle_deg.unwrap_or(p.seed_min_tri_angle_deg);
        p.min_obs_for_registration = e.min_obs_for_registration.unwrap_or(p.min_obs_for_registration);
        p.local_ba_window = e.local_ba_window.unwrap_or(p.local_ba_window);
        p.global_ba_growth = e.global_ba_growth.unwrap_or(p.global_ba_growth);
        p.max_reproj_px = e.max_reproj_px.unwrap_or(p.max_reproj_px);
        p.min_tri_angle_point_deg = e.min_tri_angle_point_deg.unwrap_or(p.min_tri_angle_point_deg);
        self.apply_ransac(&mut p.ransac);
        p
    }
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| {
        CliError::Io(IoError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| {
        CliError::Io(IoError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn features_path(project: &Path, name: &str) -> PathBuf {
    project.join("features").join(format!("{name}.txt"))
}

fn cmd_synth(ctx: &Context, a: &SynthArgs) -> Result<String, CliError> {
    let dims = ImageDims::new(a.width, a.height).map_err(|e| CliError::Usage(e.to_string()))?;
    if !(a.noise >= 0.0) || !(0.0..1.0).contains(&a.outliers) {
        return Err(CliError::Usage("--noise must be >= 0 and --outliers in [0, 1)".into()));
    }
    let layout = match a.layout {
        LayoutKind::Ring => Layout::Ring {
            n: a.cameras,
            radius: a.spacing.unwrap_or(10.0),
        },
        LayoutKind::Corridor => Layout::Corridor {
            n: a.cameras,
            step: a.spacing.unwrap_or(3.0),
        },
        LayoutKind::TwoFloors => Layout::TwoFloors { n: a.cameras },
    };
    let scene = generate(layout, a.points, dims, ctx.seed)?.with_noise(a.noise).with_outliers(a.outliers);
    let obs = observe(&scene)?;
    let project = ctx.project(&a.project);
    create_dir(&project.join("features"))?;
    write_text(&project.join("scene.txt"), &io::scene_to_string(&scene))?;
    let list: Vec<(String, ImageDims)> = obs.images.iter().map(|i| (i.name.clone(), i.dims)).collect();
    write_text(&project.join("images.txt"), &io::image_list_to_string(&list))?;
    for img in &obs.images {
        io::write_features(&features_path(&project, &img.name), &img.features)?;
    }
    let centers: Vec<(String, Vector3<f64>)> = scene
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| (synth::image_name(i), p.center()))
        .collect();
    write_text(&project.join("positions.txt"), &io::positions_to_string(&centers))?;
    if a.render {
        let dir = project.join("images");
        create_dir(&dir)?;
        (0..scene.poses.len()).into_par_iter().try_for_each(|i| {
            let path = dir.join(format!("{}.png", synth::image_name(i)));
            render_panorama(&scene, i).save(&path).map_err(|e| {
                CliError::Io(IoError::Image {
                    path: path.clone(),
                    msg: e.to_string(),
                })
            })
        })?;
    }
    Ok(format!(
        "{} cameras, {} points, {} observations written to {}",
        scene.poses.len(),
        scene.points.len(),
        obs.num_observations(),
        project.display()
    ))
}

/// Latitude-shaded background with each visible point drawn as a 5x5 block.
pub fn render_panorama(scene: &synth::SyntheticScene, camera: usize) -> RgbImage {
    let (w, h) = (scene.dims.width, scene.dims.height);
    let mut img = RgbImage::from_fn(w, h, |_, y| {
        let t = y as f64 / h as f64;
        Rgb([(90.0 + 100.0 * (1.0 - t)) as u8, (110.0 + 60.0 * (1.0 - t)) as u8, (120.0 + 40.0 * t) as u8])
    });
    let pose = &scene.poses[camera];
    let r: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| pose.rotation[(i, j)]));
    let t = [pose.translation.x, pose.translation.y, pose.translation.z];
    for (k, p) in scene.points.iter().enumerate() {
        if !scene.visible(camera, k) {
            continue;
        }
        let Some((ix, iy)) = synth::oracle_project(&r, &t, &[p.x, p.y, p.z], w as f64, h as f64) else {
            continue;
        };
        let (cx, cy) = (ix.floor() as i64, iy.floor() as i64);
        for dy in -2..=2 {
            for dx in -2..=2 {
                let y = cy + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                let x = (cx + dx).rem_euclid(w as i64);
                img.put_pixel(x as u32, y as u32, Rgb(scene.colors[k]));
            }
        }
    }
    img
}

fn load_graph_images(ctx: &Context, a: &MatchArgs, project: &Path) -> Result<Vec<GraphImage>, CliError> {
    let list_path = project.join("images.txt");
    if list_path.exists() && !a.detect {
        let list = io::read_image_list(&list_path)?;
        if list.is_empty() {
            return Err(IoError::NoImages(project.to_path_buf()).into());
        }
        return list
            .into_iter()
            .map(|(name, dims)| {
                let features = io::read_features(&features_path(project, &name))?;
                Ok(GraphImage { name, dims, features })
            })
            .collect();
    }
    let dir = ctx.image_dir(project, &a.images);
    if !dir.is_dir() {
        return Err(IoError::NoImages(dir).into());
    }
    let allow = a.no_erp_check || ctx.config.no_erp_check.unwrap_or(false);
    let loaded = io::load_images(&dir, allow)?;
    let max_features = a.max_features.or(ctx.config.features.max_features).unwrap_or(DEFAULT_MAX_FEATURES);
    let params = SiftParams::default();
    let images: Vec<GraphImage> = loaded
        .par_iter()
        .map(|img| GraphImage {
            name: img.name.clone(),
            dims: img.dims,
            features: detect_features(&img.raster, max_features, &params),
        })
        .collect();
    create_dir(&project.join("features"))?;
    for img in &images {
        log::info!("{}: {} features", img.name, img.features.len());
        io::write_features(&features_path(project, &img.name), &img.features)?;
    }
    let list: Vec<(String, ImageDims)> = images.iter().map(|i| (i.name.clone(), i.dims)).collect();
    write_text(&project.join("images.txt"), &io::image_list_to_string(&list))?;
    let gnss: Vec<(String, Vector3<f64>)> = loaded.iter().filter_map(|i| i.gnss.map(|g| (i.name.clone(), g))).collect();
    if !gnss.is_empty() && !project.join("positions.txt").exists() {
        write_text(&project.join("positions.txt"), &io::positions_to_string(&gnss))?;
    }
    Ok(images)
}

fn cmd_match(ctx: &Context, a: &MatchArgs) -> Result<MatchGraph, CliError> {
    let project = ctx.project(&a.project);
    let images = load_graph_images(ctx, a, &project)?;
    let names: Vec<String> = images.iter().map(|i| i.name.clone()).collect();
    let policy = ctx.pair_policy(&a.pairs, &project, &names)?;
    let graph = build_match_graph(images, &policy, &ctx.match_params())?;
    write_text(&project.join("matches.txt"), &io::matches_to_string(&names, &graph.pairs))?;
    Ok(graph)
}

fn read_graph(project: &Path) -> Result<MatchGraph, CliError> {
    let list = io::read_image_list(&project.join("images.txt"))?;
    let names: Vec<String> = list.iter().map(|(n, _)| n.clone()).collect();
    let images = list
        .into_iter()
        .map(|(name, dims)| {
            let features = io::read_features(&features_path(project, &name))?;
            Ok(GraphImage { name, dims, features })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let path = project.join("matches.txt");
    let text = fs::read_to_string(&path).map_err(|source| IoError::Io { path: path.clone(), source })?;
    let pairs = io::parse_matches(&path, &text, &names)?;
    Ok(MatchGraph::from_pairs(images, pairs))
}

/// Raster lookup by image name or file stem.
fn find_raster(dir: &Path, name: &str) -> Option<PathBuf> {
    let direct = dir.join(name);
    if direct.is_file() && io::is_image_file(&direct) {
        return Some(direct);
    }
    ["png", "jpg", "jpeg"].iter().map(|e| dir.join(format!("{}.{e}", stem(name)))).find(|p| p.is_file())
}

fn load_rasters(dir: &Path, graph: &MatchGraph, wanted: &[usize]) -> Result<Vec<Option<RgbImage>>, CliError> {
    let decoded: Vec<(usize, Option<RgbImage>)> = wanted
        .par_iter()
        .map(|&i| {
            let img = find_raster(dir, &graph.images[i].name).and_then(|p| match image::open(&p) {
                Ok(im) => Some(im.to_rgb8()),
                Err(e) => {
                    log::warn!("cannot decode {}: {e}", p.display());
                    None
                }
            });
            (i, img)
        })
        .collect();
    let mut out = vec![None; graph.images.len()];
    for (i, img) in decoded {
        out[i] = img;
    }
    Ok(out)
}

/// Colors each point from the raster of its first observation.
fn colorize(recon: &mut Reconstruction, graph: &MatchGraph, rasters: &[Option<RgbImage>]) {
    for p in &mut recon.points {
        let color = p.observations.iter().find_map(|&(img, f)| {
            let raster = rasters.get(img)?.as_ref()?;
            let pix = graph.images[img].features[f].pix;
            let x = (pix.ix.floor() as i64).clamp(0, raster.width() as i64 - 1) as u32;
            let y = (pix.iy.floor() as i64).clamp(0, raster.height() as i64 - 1) as u32;
            Some(raster.get_pixel(x, y).0)
        });
        p.color = color.unwrap_or([128, 128, 128]);
    }
}

fn cmd_sfm(ctx: &Context, a: &SfmArgs) -> Result<String, CliError> {
    let project = ctx.project(&a.matching.project);
    let graph = if project.join("matches.txt").exists() && !a.matching.detect {
        read_graph(&project)?
    } else {
        cmd_match(ctx, &a.matching)?
    };
    let mut recon = engine::run(&graph, &ctx.engine_policy())?;
    let dir = ctx.image_dir(&project, &a.matching.images);
    let registered: Vec<usize> = recon.registered.keys().copied().collect();
    let rasters = load_rasters(&dir, &graph, &registered)?;
    colorize(&mut recon, &graph, &rasters);
    let file = ReconstructionFile::from_reconstruction(&recon, &graph);
    io::write_reconstruction(&project.join("reconstruction.txt"), &file)?;
    let report = io::report_to_string(&recon, &graph);
    write_text(&project.join("report.txt"), &report)?;
    Ok(report.lines().take(5).collect::<Vec<_>>().join("\n"))
}

fn cmd_cubemap(ctx: &Context, a: &CubemapArgs) -> Result<String, CliError> {
    let project = ctx.project(&a.project);
    let file = io::read_reconstruction(&project.join("reconstruction.txt"))?;
    let names = file.camera_names();
    let recon = file.to_reconstruction(&names)?;
    let dir = ctx.image_dir(&project, &a.images);
    let images = names
        .iter()
        .map(|n| {
            let path = find_raster(&dir, n).ok_or_else(|| CliError::Pipeline(format!("no raster for {n} in {}", dir.display())))?;
            let raster = image::open(&path)
                .map_err(|e| IoError::Image {
                    path: path.clone(),
                    msg: e.to_string(),
                })?
                .to_rgb8();
            Ok(ErpImage {
                name: stem(n).to_string(),
                raster,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let size = a.face_size.or(ctx.config.cubemap.face_size).unwrap_or(DEFAULT_FACE_SIZE);
    let interp = if a.bicubic || ctx.config.cubemap.bicubic.unwrap_or(false) {
        Interpolation::Bicubic
    } else {
        Interpolation::Bilinear
    };
    let out = a.out.clone().unwrap_or_else(|| project.join("cubemap"));
    let summary = export_for_mvs(&recon, &images, size, interp, &out)?;
    Ok(format!("{} faces written, manifest {}", summary.faces, summary.manifest.display()))
}

fn cmd_eval(ctx: &Context, a: &ProjectArgs) -> Result<String, CliError> {
    let project = ctx.project(a);
    let scene = io::read_scene(&project.join("scene.txt"))?;
    let file = io::read_reconstruction(&project.join("reconstruction.txt"))?;
    let truth_names: Vec<String> = (0..scene.poses.len()).map(synth::image_name).collect();
    let recon = file.to_reconstruction(&truth_names)?;
    let mut out = String::new();
    let registered = recon.registered.len();
    let total = scene.poses.len();
    if registered == total {
        out.push_str("all cameras registered\n");
    } else {
        out.push_str(&format!("{registered}/{total} cameras registered\n"));
    }
    match compare_reconstruction(&recon.cameras(), &[], &scene) {
        Ok(r) => {
            out.push_str(&format!("scene diameter {:.6}\n", r.diameter));
            out.push_str(&format!("alignment scale {:.6}\n", r.scale));
            out.push_str(&format!("max rotation error {:.6e} deg\n", r.max_rotation_error_deg()));
            out.push_str(&format!(
                "max center error {:.6e} ({:.6e} of diameter)",
                r.max_center_error(),
                r.max_center_error() / r.diameter
            ));
        }
        Err(e) => out.push_str(&format!("alignment unavailable: {e}")),
    }
    Ok(out)
}

fn cmd_ply(ctx: &Context, a: &PlyArgs) -> Result<String, CliError> {
    let project = ctx.project(&a.project);
    let file = io::read_reconstruction(&project.join("reconstruction.txt"))?;
    let points: Vec<(Vector3<f64>, [u8; 3])> = file.points.iter().map(|p| (p.position, p.color)).collect();
    let out = a.out.clone().unwrap_or_else(|| project.join("points.ply"));
    io::write_ply(&out, &points, a.binary)?;
    Ok(format!("{} points written to {}", points.len(), out.display()))
}

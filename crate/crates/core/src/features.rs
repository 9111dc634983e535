//! Pair selection, descriptor matching, geometric verification and track building.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{pixel_to_sphere, ImageDims, Intrinsics, PixelCoord, SpherePoint};
use crate::two_view::{estimate_essential_ransac, RansacParams};

pub const DEFAULT_RATIO: f64 = 0.8;
pub const DEFAULT_MAX_DISTANCE: f64 = 0.7;
pub const MIN_PAIR_MATCHES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("spatial pair selection needs a position for every image ({got} of {needed})")]
    MissingPositions { needed: usize, got: usize },
    #[error("sequential pair selection needs an overlap count of at least 1")]
    InvalidOverlap,
    #[error("a match graph needs at least two images, got {0}")]
    TooFewImages(usize),
    #[error("descriptor dimensions differ ({0} vs {1})")]
    DescriptorDims(usize, usize),
}

/// A keypoint with a unit-norm descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub pix: PixelCoord,
    pub scale: f64,
    pub orientation: f64,
    pub descriptor: Vec<f32>,
}

/// Why a candidate pair did not make it into the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFailure {
    InsufficientMatches,
    NoConsensus,
    TooFewInliers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchPair {
    pub image_a: usize,
    pub image_b: usize,
    pub matches: Vec<(usize, usize)>,
    pub verified: bool,
    pub inlier_mask: Vec<bool>,
    pub essential: Option<Matrix3<f64>>,
    pub failure: Option<PairFailure>,
}

impl MatchPair {
    pub fn new(image_a: usize, image_b: usize, matches: Vec<(usize, usize)>) -> Self {
        MatchPair {
            image_a,
            image_b,
            matches,
            verified: false,
            inlier_mask: Vec::new(),
            essential: None,
            failure: None,
        }
    }

    pub fn num_inliers(&self) -> usize {
        self.inlier_mask.iter().filter(|&&b| b).count()
    }

    pub fn inlier_matches(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matches
            .iter()
            .zip(&self.inlier_mask)
            .filter(|(_, &m)| m)
            .map(|(m, _)| *m)
    }
}

/// Which image pairs are attempted. Active constraints are combined by union;
/// with none active every pair is attempted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSelectionPolicy {
    pub exhaustive: bool,
    pub sequential: Option<usize>,
    pub spatial: Option<f64>,
    pub positions: Option<Vec<Vector3<f64>>>,
}

impl PairSelectionPolicy {
    pub fn exhaustive() -> Self {
        PairSelectionPolicy {
            exhaustive: true,
            ..Default::default()
        }
    }

    pub fn sequential(k: usize) -> Self {
        PairSelectionPolicy {
            sequential: Some(k),
            ..Default::default()
        }
    }

    pub fn spatial(d_max: f64, positions: Vec<Vector3<f64>>) -> Self {
        PairSelectionPolicy {
            spatial: Some(d_max),
            positions: Some(positions),
            ..Default::default()
        }
    }
}

/// Ordered, duplicate-free candidate pairs `(a, b)` with `a < b`.
pub fn select_pairs(n_images: usize, policy: &PairSelectionPolicy) -> Result<Vec<(usize, usize)>, MatchError> {
    if policy.sequential == Some(0) {
        return Err(MatchError::InvalidOverlap);
    }
    let positions = match policy.spatial {
        Some(_) => {
            let pos = policy.positions.as_deref().unwrap_or(&[]);
            if pos.len() < n_images {
                return Err(MatchError::MissingPositions {
                    needed: n_images,
                    got: pos.len(),
                });
            }
            Some(pos)
        }
        None => None,
    };
    let all = policy.exhaustive || (policy.sequential.is_none() && policy.spatial.is_none());
    let mut pairs = Vec::new();
    for a in 0..n_images {
        for b in a + 1..n_images {
            let keep = all
                || policy.sequential.is_some_and(|k| b - a <= k)
                || match (policy.spatial, positions) {
                    (Some(d), Some(p)) => (p[a] - p[b]).norm() <= d,
                    _ => false,
                };
            if keep {
                pairs.push((a, b));
            }
        }
    }
    Ok(pairs)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_two(query: &[f32], set: &[Feature]) -> Option<(usize, f64, Option<f64>)> {
    let mut best: Option<(usize, f32)> = None;
    let mut second: Option<f32> = None;
    for (j, f) in set.iter().enumerate() {
        let d = sq_dist(query, &f.descriptor);
        match best {
            Some((_, bd)) if d >= bd => {
                if second.is_none_or(|s| d < s) {
                    second = Some(d);
                }
            }
            _ => {
                second = best.map(|(_, bd)| bd);
                best = Some((j, d));
            }
        }
    }
    best.map(|(j, d)| (j, (d as f64).sqrt(), second.map(|s| (s as f64).sqrt())))
}

/// Exact nearest-neighbour matching with ratio, distance and cross-check filters.
///
/// The ratio test is skipped when `fb` holds a single descriptor.
pub fn match_descriptors(
    fa: &[Feature],
    fb: &[Feature],
    ratio: f64,
    max_dist: f64,
) -> Result<Vec<(usize, usize)>, MatchError> {
    if fa.is_empty() || fb.is_empty() {
        return Ok(Vec::new());
    }
    let (da, db) = (fa[0].descriptor.len(), fb[0].descriptor.len());
    if da != db || fa.iter().chain(fb).any(|f| f.descriptor.len() != da) {
        return Err(MatchError::DescriptorDims(da, db));
    }
    let forward: Vec<Option<usize>> = fa
        .par_iter()
        .map(|f| {
            let (j, d1, d2) = nearest_two(&f.descriptor, fb)?;
            let ratio_ok = match d2 {
                None => true,
                Some(d2) => d2 > 0.0 && d1 / d2 < ratio,
            };
            (d1 < max_dist && ratio_ok).then_some(j)
        })
        .collect();
    let backward: Vec<Option<usize>> = fb
        .par_iter()
        .map(|f| nearest_two(&f.descriptor, fa).map(|(i, _, _)| i))
        .collect();
    Ok(forward
        .iter()
        .enumerate()
        .filter_map(|(i, j)| {
            let j = (*j)?;
            (backward[j] == Some(i)).then_some((i, j))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyParams {
    pub ransac: RansacParams,
    pub min_pair_inliers: usize,
}

impl Default for VerifyParams {
    fn default() -> Self {
        VerifyParams {
            ransac: RansacParams::default(),
            min_pair_inliers: 15,
        }
    }
}

/// Robust essential-matrix fit over a pair's matches.
pub fn verify_pair(
    mut pair: MatchPair,
    features_a: &[Feature],
    features_b: &[Feature],
    dims_a: ImageDims,
    dims_b: ImageDims,
    params: &VerifyParams,
) -> MatchPair {
    pair.verified = false;
    pair.essential = None;
    pair.inlier_mask = vec![false; pair.matches.len()];
    if pair.matches.len() < MIN_PAIR_MATCHES {
        pair.failure = Some(PairFailure::InsufficientMatches);
        return pair;
    }
    let (ia, ib) = (Intrinsics::new(dims_a), Intrinsics::new(dims_b));
    let lift = |f: &Feature, intr: &Intrinsics| pixel_to_sphere(f.pix, intr).ok();
    let mut p1 = Vec::with_capacity(pair.matches.len());
    let mut p2 = Vec::with_capacity(pair.matches.len());
    let mut usable = Vec::with_capacity(pair.matches.len());
    for (k, &(a, b)) in pair.matches.iter().enumerate() {
        if let (Some(x), Some(y)) = (lift(&features_a[a], &ia), lift(&features_b[b], &ib)) {
            p1.push(x);
            p2.push(y);
            usable.push(k);
        }
    }
    // The stricter of the two angular thresholds.
    let dims = if dims_a.max_side() >= dims_b.max_side() { dims_a } else { dims_b };
    let ransac = RansacParams {
        rng_seed: pair_seed(params.ransac.rng_seed, pair.image_a, pair.image_b),
        ..params.ransac
    };
    match estimate_essential_ransac(&p1, &p2, dims, &ransac) {
        Ok(est) => {
            for (k, &inl) in usable.iter().zip(&est.inliers) {
                pair.inlier_mask[*k] = inl;
            }
            pair.essential = Some(est.essential.0);
            if est.num_inliers() >= params.min_pair_inliers {
                pair.verified = true;
                pair.failure = None;
            } else {
                pair.failure = Some(PairFailure::TooFewInliers);
            }
        }
        Err(_) => pair.failure = Some(PairFailure::NoConsensus),
    }
    pair
}

/// Per-pair RNG seed derived from the global one, independent of scheduling order.
pub fn pair_seed(seed: u64, a: usize, b: usize) -> u64 {
    let mut z = seed ^ ((a as u64) << 32 | b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    Unreconstructed,
    Reconstructed(usize),
    Rejected,
}

/// One physical point seen across images as `(image, feature)` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: usize,
    pub observations: Vec<(usize, usize)>,
    pub state: TrackState,
}

impl Track {
    pub fn feature_in(&self, image: usize) -> Option<usize> {
        self.observations.iter().find(|(i, _)| *i == image).map(|(_, f)| *f)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Connected components of verified inlier matches. Components that contain two
/// features of the same image are dropped.
pub fn build_tracks(feature_counts: &[usize], pairs: &[MatchPair]) -> Vec<Track> {
    let offsets: Vec<usize> = feature_counts
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let total: usize = feature_counts.iter().sum();
    let mut uf = UnionFind::new(total);
    let mut touched = vec![false; total];
    for pair in pairs.iter().filter(|p| p.verified) {
        for (a, b) in pair.inlier_matches() {
            let (na, nb) = (offsets[pair.image_a] + a, offsets[pair.image_b] + b);
            touched[na] = true;
            touched[nb] = true;
            uf.union(na, nb);
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for image in 0..feature_counts.len() {
        for f in 0..feature_counts[image] {
            let node = offsets[image] + f;
            if touched[node] {
                let root = uf.find(node);
                groups.entry(root).or_default().push((image, f));
            }
        }
    }
    let mut tracks = Vec::new();
    for (_, obs) in groups {
        if obs.len() < 2 || obs.windows(2).any(|w| w[0].0 == w[1].0) {
            continue;
        }
        tracks.push(Track {
            id: tracks.len(),
            observations: obs,
            state: TrackState::Unreconstructed,
        });
    }
    tracks
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphImage {
    pub name: String,
    pub dims: ImageDims,
    pub features: Vec<Feature>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchGraph {
    pub images: Vec<GraphImage>,
    pub pairs: Vec<MatchPair>,
    pub tracks: Vec<Track>,
}

impl MatchGraph {
    /// Graph over already-matched pairs; tracks are rebuilt from the verified ones.
    pub fn from_pairs(images: Vec<GraphImage>, pairs: Vec<MatchPair>) -> Self {
        let counts: Vec<usize> = images.iter().map(|i| i.features.len()).collect();
        let tracks = build_tracks(&counts, &pairs);
        MatchGraph { images, pairs, tracks }
    }

    pub fn verified_pairs(&self) -> impl Iterator<Item = &MatchPair> {
        self.pairs.iter().filter(|p| p.verified)
    }

    pub fn bearing(&self, image: usize, feature: usize) -> Option<SpherePoint> {
        let img = self.images.get(image)?;
        pixel_to_sphere(img.features.get(feature)?.pix, &Intrinsics::new(img.dims)).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub ratio: f64,
    pub max_distance: f64,
    pub verify: VerifyParams,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            ratio: DEFAULT_RATIO,
            max_distance: DEFAULT_MAX_DISTANCE,
            verify: VerifyParams::default(),
        }
    }
}

/// Selects pairs, matches and verifies them in parallel, and builds tracks.
/// The result does not depend on the thread count.
pub fn build_match_graph(
    images: Vec<GraphImage>,
    policy: &PairSelectionPolicy,
    params: &MatchParams,
) -> Result<MatchGraph, MatchError> {
    if images.len() < 2 {
        return Err(MatchError::TooFewImages(images.len()));
    }
    let candidates = select_pairs(images.len(), policy)?;
    let pairs: Result<Vec<MatchPair>, MatchError> = candidates
        .par_iter()
        .map(|&(a, b)| {
            let (ia, ib) = (&images[a], &images[b]);
            let matches = match_descriptors(&ia.features, &ib.features, params.ratio, params.max_distance)?;
            let pair = verify_pair(
                MatchPair::new(a, b, matches),
                &ia.features,
                &ib.features,
                ia.dims,
                ib.dims,
                &params.verify,
            );
            log::debug!(
                "pair {}-{}: {} matches, {} inliers, verified={}",
                ia.name,
                ib.name,
                pair.matches.len(),
                pair.num_inliers(),
                pair.verified
            );
            Ok(pair)
        })
        .collect();
    let pairs = pairs?;
    log::info!(
        "{} of {} candidate pairs verified",
        pairs.iter().filter(|p| p.verified).count(),
        pairs.len()
    );
    Ok(MatchGraph::from_pairs(images, pairs))
}

//! Difference-of-Gaussians keypoints with gradient-histogram descriptors.

use std::f64::consts::TAU;

use image::RgbImage;
use rayon::prelude::*;

use crate::camera::PixelCoord;
use crate::features::Feature;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftParams {
    pub intervals: usize,
    pub sigma: f64,
    pub contrast_threshold: f64,
    pub edge_ratio: f64,
    pub min_size: usize,
}

impl Default for SiftParams {
    fn default() -> Self {
        SiftParams {
            intervals: 3,
            sigma: 1.6,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
            min_size: 16,
        }
    }
}

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Plane {
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    fn clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.at(x, y)
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let data = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| self.at(2 * x, 2 * y)).collect();
        Plane { w, h, data }
    }

    fn blur(&self, sigma: f64) -> Plane {
        let radius = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let s: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= s);
        let (w, h) = (self.w, self.h);
        let mut tmp = vec![0.0f32; w * h];
        tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, out) in row.iter_mut().enumerate() {
                *out = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * self.clamped(x as isize + k as isize - radius, y as isize))
                    .sum();
            }
        });
        let tmp = Plane { w, h, data: tmp };
        let mut out = vec![0.0f32; w * h];
        out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            for (x, o) in row.iter_mut().enumerate() {
                *o = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * tmp.clamped(x as isize, y as isize + k as isize - radius))
                    .sum();
            }
        });
        Plane { w, h, data: out }
    }
}

fn luminance(img: &RgbImage) -> Plane {
    let data = img
        .pixels()
        .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
        .collect();
    Plane {
        w: img.width() as usize,
        h: img.height() as usize,
        data,
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(base: &Plane, p: &SiftParams) -> Vec<Octave> {
    let s = p.intervals;
    let k = 2f64.powf(1.0 / s as f64);
    // Incremental blur between consecutive levels of an octave.
    let steps: Vec<f64> = (1..s + 3)
        .map(|i| {
            let prev = p.sigma * k.powi(i as i32 - 1);
            let next = prev * k;
            (next * next - prev * prev).sqrt()
        })
        .collect();
    let mut octaves = Vec::new();
    let assumed = 0.5f64;
    let mut first = base.blur((p.sigma * p.sigma - assumed * assumed).sqrt());
    while first.w >= p.min_size && first.h >= p.min_size {
        let mut gauss = vec![first.clone()];
        for st in &steps {
            let next = gauss.last().unwrap().blur(*st);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|g| Plane {
                w: g[0].w,
                h: g[0].h,
                data: g[1].data.iter().zip(&g[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        first = gauss[s].downsample();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

struct Keypoint {
    octave: usize,
    layer: usize,
    x: f64,
    y: f64,
    sigma_oct: f64,
    response: f64,
}

fn is_extremum(dog: &[Plane], l: usize, x: usize, y: usize) -> bool {
    let v = dog[l].at(x, y);
    let mut is_max = true;
    let mut is_min = true;
    for plane in &dog[l - 1..=l + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = plane.at(xx, yy);
                if std::ptr::eq(plane, &dog[l]) && xx == x && yy == y {
                    continue;
                }
                is_max &= v > n;
                is_min &= v < n;
            }
        }
    }
    is_max || is_min
}

fn refine(dog: &[Plane], mut l: usize, mut x: usize, mut y: usize, p: &SiftParams, sigma_k: f64) -> Option<Keypoint> {
    let s = p.intervals;
    let (w, h) = (dog[0].w, dog[0].h);
    for _ in 0..5 {
        let d = |dl: isize, dx: isize, dy: isize| -> f64 {
            dog[(l as isize + dl) as usize].at((x as isize + dx) as usize, (y as isize + dy) as usize) as f64
        };
        let g = nalgebra::Vector3::new(
            (d(0, 1, 0) - d(0, -1, 0)) / 2.0,
            (d(0, 0, 1) - d(0, 0, -1)) / 2.0,
            (d(1, 0, 0) - d(-1, 0, 0)) / 2.0,
        );
        let c = d(0, 0, 0);
        let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * c;
        let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * c;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * c;
        let dxy = (d(0, 1, 1) - d(0, -1, 1) - d(0, 1, -1) + d(0, -1, -1)) / 4.0;
        let dxs = (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0)) / 4.0;
        let dys = (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1)) / 4.0;
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let off = -(hess.lu().solve(&g)?);
        if off.iter().all(|o| o.abs() < 0.5) {
            let response = c + 0.5 * g.dot(&off);
            if response.abs() < p.contrast_threshold / s as f64 {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let r = p.edge_ratio;
            if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
                return None;
            }
            let layer_f = l as f64 + off[2];
            return Some(Keypoint {
                octave: 0,
                layer: l,
                x: x as f64 + off[0],
                y: y as f64 + off[1],
                sigma_oct: p.sigma * sigma_k.powf(layer_f),
                response: response.abs(),
            });
        }
        let step = |v: usize, o: f64| (v as f64 + o.round()) as isize;
        let (nx, ny, nl) = (step(x, off[0]), step(y, off[1]), step(l, off[2]));
        if nl < 1 || nl as usize > s || nx < 1 || ny < 1 || nx as usize >= w - 1 || ny as usize >= h - 1 {
            return None;
        }
        x = nx as usize;
        y = ny as usize;
        l = nl as usize;
    }
    None
}

fn orientations(g: &Plane, x: f64, y: f64, sigma: f64) -> Vec<f64> {
    const BINS: usize = 36;
    let mut hist = [0.0f64; BINS];
    let sw = 1.5 * sigma;
    let radius = (3.0 * sw).round() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px < 1 || py < 1 || px >= g.w as isize - 1 || py >= g.h as isize - 1 {
                continue;
            }
            let gx = (g.clamped(px + 1, py) - g.clamped(px - 1, py)) as f64;
            let gy = (g.clamped(px, py + 1) - g.clamped(px, py - 1)) as f64;
            let weight = (-((dx * dx + dy * dy) as f64) / (2.0 * sw * sw)).exp();
            let angle = gy.atan2(gx).rem_euclid(TAU);
            let bin = ((angle / TAU * BINS as f64).round() as usize) % BINS;
            hist[bin] += weight * gx.hypot(gy);
        }
    }
    for _ in 0..2 {
        let prev = hist;
        for i in 0..BINS {
            hist[i] = (prev[(i + BINS - 1) % BINS] + 2.0 * prev[i] + prev[(i + 1) % BINS]) / 4.0;
        }
    }
    let peak = hist.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return vec![0.0];
    }
    let mut out = Vec::new();
    for i in 0..BINS {
        let (l, r) = (hist[(i + BINS - 1) % BINS], hist[(i + 1) % BINS]);
        if hist[i] > l && hist[i] > r && hist[i] >= 0.8 * peak {
            let interp = 0.5 * (l - r) / (l - 2.0 * hist[i] + r);
            out.push(((i as f64 + interp) / BINS as f64 * TAU).rem_euclid(TAU));
        }
    }
    out
}

fn descriptor(g: &Plane, x: f64, y: f64, sigma: f64, angle: f64) -> Vec<f32> {
    const D: usize = 4;
    const N: usize = 8;
    let mut hist = vec![0.0f64; D * D * N];
    let hist_width = 3.0 * sigma;
    let radius = (hist_width * std::f64::consts::SQRT_2 * (D as f64 + 1.0) * 0.5).round() as isize;
    let (cos_a, sin_a) = (angle.cos(), angle.sin());
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (px, py) = (cx + dx, cy + dy);
            if px < 1 || py < 1 || px >= g.w as isize - 1 || py >= g.h as isize - 1 {
                continue;
            }
            let (fx, fy) = (px as f64 - x, py as f64 - y);
            let rx = (cos_a * fx + sin_a * fy) / hist_width;
            let ry = (-sin_a * fx + cos_a * fy) / hist_width;
            let bx = rx + D as f64 / 2.0 - 0.5;
            let by = ry + D as f64 / 2.0 - 0.5;
            if bx <= -1.0 || by <= -1.0 || bx >= D as f64 || by >= D as f64 {
                continue;
            }
            let gx = (g.clamped(px + 1, py) - g.clamped(px - 1, py)) as f64;
            let gy = (g.clamped(px, py + 1) - g.clamped(px, py - 1)) as f64;
            let mag = gx.hypot(gy) * (-(rx * rx + ry * ry) / (0.5 * (D * D) as f64)).exp();
            let ori = (gy.atan2(gx) - angle).rem_euclid(TAU) / TAU * N as f64;
            let (x0, y0, o0) = (bx.floor(), by.floor(), ori.floor());
            let (ax, ay, ao) = (bx - x0, by - y0, ori - o0);
            for (iy, wy) in [(y0 as isize, 1.0 - ay), (y0 as isize + 1, ay)] {
                if iy < 0 || iy >= D as isize {
                    continue;
                }
                for (ix, wx) in [(x0 as isize, 1.0 - ax), (x0 as isize + 1, ax)] {
                    if ix < 0 || ix >= D as isize {
                        continue;
                    }
                    for (io, wo) in [(o0 as usize % N, 1.0 - ao), ((o0 as usize + 1) % N, ao)] {
                        hist[(iy as usize * D + ix as usize) * N + io] += mag * wx * wy * wo;
                    }
                }
            }
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        hist.iter_mut().for_each(|v| *v = (*v / norm).min(0.2));
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 {
        let uniform = 1.0 / (hist.len() as f64).sqrt();
        return vec![uniform as f32; hist.len()];
    }
    hist.iter().map(|v| (v / norm) as f32).collect()
}

/// Detects at most `max_features` keypoints, keeping those with the largest scale.
pub fn detect_features(img: &RgbImage, max_features: usize, params: &SiftParams) -> Vec<Feature> {
    if img.width() == 0 || img.height() == 0 || max_features == 0 {
        return Vec::new();
    }
    let base = luminance(img);
    let pyramid = build_pyramid(&base, params);
    let s = params.intervals;
    let k = 2f64.powf(1.0 / s as f64);
    let threshold = (0.5 * params.contrast_threshold / s as f64) as f32;

    let mut keypoints: Vec<Keypoint> = Vec::new();
    for (o, oct) in pyramid.iter().enumerate() {
        let (w, h) = (oct.dog[0].w, oct.dog[0].h);
        for l in 1..=s {
            let found: Vec<Keypoint> = (1..h - 1)
                .into_par_iter()
                .flat_map_iter(|y| {
                    let mut row = Vec::new();
                    for x in 1..w - 1 {
                        if oct.dog[l].at(x, y).abs() > threshold && is_extremum(&oct.dog, l, x, y) {
                            if let Some(mut kp) = refine(&oct.dog, l, x, y, params, k) {
                                kp.octave = o;
                                row.push(kp);
                            }
                        }
                    }
                    row
                })
                .collect();
            keypoints.extend(found);
        }
    }

    let mut features: Vec<(Feature, f64)> = keypoints
        .par_iter()
        .flat_map_iter(|kp| {
            let g = &pyramid[kp.octave].gauss[kp.layer];
            let scale_factor = (1u64 << kp.octave) as f64;
            orientations(g, kp.x, kp.y, kp.sigma_oct)
                .into_iter()
                .map(|angle| {
                    let desc = descriptor(g, kp.x, kp.y, kp.sigma_oct, angle);
                    (
                        Feature {
                            pix: PixelCoord::new(kp.x * scale_factor, kp.y * scale_factor),
                            scale: kp.sigma_oct * scale_factor,
                            orientation: angle,
                            descriptor: desc,
                        },
                        kp.response,
                    )
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let (w, h) = (img.width() as f64, img.height() as f64);
    features.retain(|(f, _)| f.pix.ix >= 0.0 && f.pix.iy >= 0.0 && f.pix.ix < w && f.pix.iy < h);
    features.sort_by(|(a, ra), (b, rb)| {
        b.scale
            .total_cmp(&a.scale)
            .then(rb.total_cmp(ra))
            .then(a.pix.iy.total_cmp(&b.pix.iy))
            .then(a.pix.ix.total_cmp(&b.pix.ix))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    features.truncate(max_features);
    features.into_iter().map(|(f, _)| f).collect()
}

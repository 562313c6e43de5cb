//! Synthetic guidewire-like images and scribble simulation.
//!
//! Each image holds one bright smooth curve (the target) and a few
//! lower-contrast distractor curves over a flat background, plus Gaussian
//! noise. Curves are Catmull-Rom splines through random control points,
//! rasterised on a supersampled grid and thresholded at half coverage.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::types::{AnnotationMap, Dims, FullMask, Image, Label};

const SUPERSAMPLE: usize = 4;
/// Distractor contrast as a fraction of the target contrast.
const DISTRACTOR_CONTRAST: (f64, f64) = (0.35, 0.65);
/// Background stroke length range, in pixels.
const STROKE_LEN: (usize, usize) = (5, 15);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_images: usize,
    pub curve_control_points: usize,
    pub curve_thickness_px: usize,
    pub n_distractors: usize,
    pub noise_sigma: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_images: 100,
            curve_control_points: 6,
            curve_thickness_px: 2,
            n_distractors: 2,
            noise_sigma: 0.15,
            contrast: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::config("synth.image_size", "must be at least 16"));
        }
        if !(4..=8).contains(&self.curve_control_points) {
            return Err(Error::config("synth.curve_control_points", "must lie in [4, 8]"));
        }
        if !(1..=3).contains(&self.curve_thickness_px) {
            return Err(Error::config("synth.curve_thickness_px", "must lie in [1, 3]"));
        }
        if !(0.0..=1.0).contains(&self.noise_sigma) {
            return Err(Error::config("synth.noise_sigma", "must lie in [0, 1]"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::config("synth.contrast", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

type Point = (f64, f64);

fn catmull_rom(p0: Point, p1: Point, p2: Point, p3: Point, t: f64) -> Point {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
    };
    (f(p0.0, p1.0, p2.0, p3.0), f(p0.1, p1.1, p2.1, p3.1))
}

/// Dense samples along the interpolating spline through `ctrl`.
fn spline_samples(ctrl: &[Point]) -> Vec<Point> {
    let n = ctrl.len();
    let at = |i: isize| ctrl[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::new();
    for i in 0..n - 1 {
        let (p0, p1, p2, p3) = (
            at(i as isize - 1),
            at(i as isize),
            at(i as isize + 1),
            at(i as isize + 2),
        );
        let chord = ((p2.0 - p1.0).powi(2) + (p2.1 - p1.1).powi(2)).sqrt();
        // Generous step count: spline arcs can be longer than the chord.
        let steps = ((chord * 2.0 + 4.0) * SUPERSAMPLE as f64 * 2.0).ceil() as usize;
        for s in 0..steps {
            out.push(catmull_rom(p0, p1, p2, p3, s as f64 / steps as f64));
        }
    }
    out.push(ctrl[n - 1]);
    out
}

/// Random control points ordered along a random direction so the spline
/// sweeps across the frame instead of knotting.
fn control_points(size: usize, count: usize, rng: &mut Rng) -> Vec<Point> {
    let s = size as f64;
    let margin = 0.1 * s;
    let mut pts: Vec<Point> = (0..count)
        .map(|_| {
            (
                rng.random_range(margin..s - margin),
                rng.random_range(margin..s - margin),
            )
        })
        .collect();
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let dir = (angle.cos(), angle.sin());
    pts.sort_by(|a, b| (a.0 * dir.0 + a.1 * dir.1).total_cmp(&(b.0 * dir.0 + b.1 * dir.1)));
    pts
}

/// Rasterises a curve of the given thickness; pixels at least half covered are set.
fn render_curve(size: usize, ctrl: &[Point], thickness: usize) -> Vec<bool> {
    let ss = SUPERSAMPLE;
    let fine = size * ss;
    let mut sub = vec![false; fine * fine];
    let radius = thickness as f64 / 2.0;
    let r_sub = (radius * ss as f64).ceil() as isize + 1;
    // Control points are (x, y) in pixel units with pixel centres at i + 0.5.
    for (x, y) in spline_samples(ctrl) {
        let cx = (x * ss as f64) as isize;
        let cy = (y * ss as f64) as isize;
        for v in cy - r_sub..=cy + r_sub {
            if v < 0 || v >= fine as isize {
                continue;
            }
            for u in cx - r_sub..=cx + r_sub {
                if u < 0 || u >= fine as isize {
                    continue;
                }
                let sx = (u as f64 + 0.5) / ss as f64;
                let sy = (v as f64 + 0.5) / ss as f64;
                if (sx - x).powi(2) + (sy - y).powi(2) <= radius * radius {
                    sub[v as usize * fine + u as usize] = true;
                }
            }
        }
    }
    let half = ss * ss / 2;
    let mut out = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let mut n = 0;
            for v in 0..ss {
                for u in 0..ss {
                    n += usize::from(sub[(r * ss + v) * fine + c * ss + u]);
                }
            }
            out[r * size + c] = n >= half;
        }
    }
    out
}

fn generate_one(cfg: &SynthConfig, seed: u64) -> (Image, FullMask) {
    let mut rng = rng_from_seed(seed);
    let size = cfg.image_size;
    let dims = Dims::new(size, size);
    let background = (1.0 - cfg.contrast) / 2.0;
    let (wire, distractors) = loop {
        let ctrl = control_points(size, cfg.curve_control_points, &mut rng);
        let wire = render_curve(size, &ctrl, cfg.curve_thickness_px);
        let distractors: Vec<(Vec<bool>, f64)> = (0..cfg.n_distractors)
            .map(|_| {
                let ctrl = control_points(size, cfg.curve_control_points, &mut rng);
                let level = rng.random_range(DISTRACTOR_CONTRAST.0..DISTRACTOR_CONTRAST.1);
                (render_curve(size, &ctrl, cfg.curve_thickness_px), level)
            })
            .collect();
        if wire.iter().any(|&v| v) {
            break (wire, distractors);
        }
    };
    let mut data = vec![background; size * size];
    for (curve, level) in &distractors {
        for (v, &on) in data.iter_mut().zip(curve) {
            if on {
                *v = v.max(background + cfg.contrast * level);
            }
        }
    }
    for (v, &on) in data.iter_mut().zip(&wire) {
        if on {
            *v = background + cfg.contrast;
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
    }
    let image = Image {
        dims,
        data: data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
    };
    let mask = FullMask {
        dims,
        data: wire.into_iter().map(u8::from).collect(),
    };
    (image, mask)
}

/// Generates `cfg.n_images` image/mask pairs. Image `i` depends only on
/// `(cfg, i)`, so the output is identical however the work is scheduled.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<(Image, FullMask)>> {
    cfg.validate()?;
    Ok((0..cfg.n_images)
        .into_par_iter()
        .map(|i| generate_one(cfg, derive_seed(cfg.seed, i as u64)))
        .collect())
}

fn neighbours8(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let (h, w) = (dims.height as isize, dims.width as isize);
    let (r, c) = ((i / dims.width) as isize, (i % dims.width) as isize);
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
        .into_iter()
        .filter_map(move |(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            (rr >= 0 && cc >= 0 && rr < h && cc < w).then_some((rr * w + cc) as usize)
        })
}

fn bfs(dims: Dims, inside: &[bool], start: usize) -> Vec<(usize, usize)> {
    let mut dist = vec![usize::MAX; inside.len()];
    let mut queue = VecDeque::from([start]);
    dist[start] = 0;
    let mut order = Vec::new();
    while let Some(i) = queue.pop_front() {
        order.push((i, dist[i]));
        for j in neighbours8(dims, i) {
            if inside[j] && dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    order
}

/// Foreground pixels ordered along each connected component's length:
/// geodesic distance from one extremity, then raster order.
fn skeleton_order(mask: &FullMask) -> Vec<usize> {
    let dims = mask.dims;
    let fg: Vec<bool> = mask.data.iter().map(|&v| v == 1).collect();
    let mut seen = vec![false; fg.len()];
    let mut order = Vec::with_capacity(fg.iter().filter(|&&v| v).count());
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let reach = bfs(dims, &fg, start);
        let extremity = reach
            .iter()
            .max_by_key(|&&(i, d)| (d, std::cmp::Reverse(i)))
            .expect("nonempty")
            .0;
        let mut along = bfs(dims, &fg, extremity);
        along.sort_by_key(|&(i, d)| (d, i));
        for (i, _) in along {
            seen[i] = true;
            order.push(i);
        }
    }
    order
}

/// `floor(fraction * count)`, tolerant of representation error in `fraction`.
pub fn labeled_target(fraction: f64, count: usize) -> usize {
    ((fraction * count as f64 + 1e-9).floor() as usize).min(count)
}

/// Random composition of `total` into `parts` positive integers.
fn composition(total: usize, parts: usize, rng: &mut Rng) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    let mut cuts: Vec<usize> = (1..total).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(parts - 1).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(total)) {
        out.push(c - prev);
        prev = c;
    }
    out
}

/// Background coverage used when none is configured.
pub const DEFAULT_BG_COVERAGE: f64 = 0.02;

/// Degrades a full mask into scribble supervision.
///
/// Exactly `floor(coverage * |fg|)` foreground pixels are kept, as one to
/// three contiguous runs along the curve, and exactly
/// `floor(bg_coverage * |bg|)` background pixels, as short random strokes.
/// Labels are never flipped.
pub fn make_scribbles(mask: &FullMask, coverage: f64, bg_coverage: f64, seed: u64) -> Result<AnnotationMap> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::config("scribble.coverage", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&bg_coverage) {
        return Err(Error::config("scribble.bg_coverage", "must lie in [0, 1]"));
    }
    let fg_total = mask.foreground_count();
    if fg_total == 0 {
        return Err(Error::Invalid("cannot scribble a mask without foreground".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut out = AnnotationMap::unlabeled(mask.dims);

    let order = skeleton_order(mask);
    let n_fg = labeled_target(coverage, fg_total);
    if n_fg > 0 {
        let runs = rng.random_range(1..=3usize).min(n_fg);
        let lengths = composition(n_fg, runs, &mut rng);
        // Distribute the unlabeled remainder over the runs + 1 gaps.
        let slack = fg_total - n_fg;
        let mut gaps = vec![0usize; runs + 1];
        for _ in 0..slack {
            gaps[rng.random_range(0..=runs)] += 1;
        }
        let mut pos = 0;
        for (len, gap) in lengths.iter().zip(&gaps) {
            pos += gap;
            for &i in &order[pos..pos + len] {
                out.data[i] = Label::Foreground;
            }
            pos += len;
        }
    }

    let bg_total = mask.data.len() - fg_total;
    let n_bg = labeled_target(bg_coverage, bg_total);
    let mut candidates: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i] == 0).collect();
    candidates.shuffle(&mut rng);
    let mut placed = 0;
    for start in candidates {
        if placed == n_bg {
            break;
        }
        if out.data[start] != Label::Unlabeled {
            continue;
        }
        let len = rng.random_range(STROKE_LEN.0..=STROKE_LEN.1);
        let mut at = start;
        out.data[at] = Label::Background;
        placed += 1;
        for _ in 1..len {
            if placed == n_bg {
                break;
            }
            let next: Vec<usize> = neighbours8(mask.dims, at)
                .filter(|&j| mask.data[j] == 0 && out.data[j] == Label::Unlabeled)
                .collect();
            let Some(&j) = next.get(rng.random_range(0..next.len().max(1))) else {
                break;
            };
            out.data[j] = Label::Background;
            placed += 1;
            at = j;
        }
    }
    Ok(out)
}

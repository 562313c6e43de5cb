//! Paired geometric augmentation.
//!
//! One affine transform is sampled per sample and applied to the image
//! (bilinear) and to every label map (nearest neighbour), so labels are only
//! ever copied from an existing source pixel or filled as "no supervision".

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{AnnotationMap, Dims, FullMask, Image, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Scale factors are drawn from `[1 - zoom_range, 1 + zoom_range]` per axis.
    pub zoom_range: f64,
    /// Shift as a fraction of the image size, per axis.
    pub translation_range: f64,
    pub shear_max_deg: f64,
    pub rotation_max_deg: f64,
    /// Probability of a horizontal flip.
    pub flip_prob: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_range: 0.2,
            translation_range: 0.2,
            shear_max_deg: 45.0,
            rotation_max_deg: 45.0,
            flip_prob: 0.5,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("augment.zoom_range", self.zoom_range),
            ("augment.translation_range", self.translation_range),
            ("augment.shear_max_deg", self.shear_max_deg),
            ("augment.rotation_max_deg", self.rotation_max_deg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be finite and nonnegative"));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::config("augment.zoom_range", "must be below 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("augment.flip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Output-to-source affine map in `(x = col, y = row)` pixel coordinates,
/// centred on the image centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    /// Inverse of the forward linear part.
    inverse: [[f64; 2]; 2],
    /// Forward translation in pixels.
    shift: (f64, f64),
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            inverse: [[1.0, 0.0], [0.0, 1.0]],
            shift: (0.0, 0.0),
        }
    }

    /// Builds `flip * rotate * shear * zoom` followed by a shift.
    pub fn compose(rotation_deg: f64, shear_deg: f64, zoom: (f64, f64), shift: (f64, f64), flip: bool) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        let rot = [[c, -s], [s, c]];
        let shear = [
            [1.0, -shear_deg.to_radians().sin()],
            [0.0, shear_deg.to_radians().cos()],
        ];
        let zoom_m = [[zoom.0, 0.0], [0.0, zoom.1]];
        let flip_m = [[if flip { -1.0 } else { 1.0 }, 0.0], [0.0, 1.0]];
        let m = matmul(flip_m, matmul(rot, matmul(shear, zoom_m)));
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let inverse = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
        Self { inverse, shift }
    }

    pub fn horizontal_flip() -> Self {
        Self::compose(0.0, 0.0, (1.0, 1.0), (0.0, 0.0), true)
    }

    /// Source location `(row, col)` sampled by output pixel `(row, col)`.
    pub fn source(&self, dims: Dims, row: usize, col: usize) -> (f64, f64) {
        let cx = (dims.width as f64 - 1.0) / 2.0;
        let cy = (dims.height as f64 - 1.0) / 2.0;
        let dx = col as f64 - cx - self.shift.0;
        let dy = row as f64 - cy - self.shift.1;
        let sx = self.inverse[0][0] * dx + self.inverse[0][1] * dy + cx;
        let sy = self.inverse[1][0] * dx + self.inverse[1][1] * dy + cy;
        (sy, sx)
    }

    /// Nearest source pixel index, if inside the frame.
    pub fn nearest(&self, dims: Dims, row: usize, col: usize) -> Option<usize> {
        let (sy, sx) = self.source(dims, row, col);
        let (r, c) = (sy.round(), sx.round());
        (r >= 0.0 && c >= 0.0 && r < dims.height as f64 && c < dims.width as f64)
            .then(|| r as usize * dims.width + c as usize)
    }
}

fn matmul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn sample_transform(cfg: &AugmentConfig, dims: Dims, rng: &mut Rng) -> Transform {
    let sym = |rng: &mut Rng, r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let rotation = sym(rng, cfg.rotation_max_deg);
    let shear = sym(rng, cfg.shear_max_deg);
    let zoom = (1.0 + sym(rng, cfg.zoom_range), 1.0 + sym(rng, cfg.zoom_range));
    let shift = (
        sym(rng, cfg.translation_range) * dims.width as f64,
        sym(rng, cfg.translation_range) * dims.height as f64,
    );
    let flip = rng.random::<f64>() < cfg.flip_prob;
    Transform::compose(rotation, shear, zoom, shift, flip)
}

/// Bilinear resampling; taps outside the frame read as 0.
pub fn warp_image(image: &Image, t: &Transform) -> Image {
    let dims = image.dims;
    let (h, w) = (dims.height as isize, dims.width as isize);
    let tap = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h || c >= w {
            0.0
        } else {
            image.data[(r * w + c) as usize] as f64
        }
    };
    let mut out = Image::zeros(dims);
    for row in 0..dims.height {
        for col in 0..dims.width {
            let (sy, sx) = t.source(dims, row, col);
            let (r0, c0) = (sy.floor(), sx.floor());
            if r0 < -1.0 || c0 < -1.0 || r0 >= h as f64 || c0 >= w as f64 {
                continue;
            }
            let (fy, fx) = (sy - r0, sx - c0);
            let (r0, c0) = (r0 as isize, c0 as isize);
            let v = tap(r0, c0) * (1.0 - fy) * (1.0 - fx)
                + tap(r0, c0 + 1) * (1.0 - fy) * fx
                + tap(r0 + 1, c0) * fy * (1.0 - fx)
                + tap(r0 + 1, c0 + 1) * fy * fx;
            out.data[row * dims.width + col] = v as f32;
        }
    }
    out
}

fn warp_nearest<T: Copy>(data: &[T], dims: Dims, t: &Transform, fill: T) -> Vec<T> {
    let mut out = vec![fill; data.len()];
    for row in 0..dims.height {
        for col in 0..dims.width {
            if let Some(src) = t.nearest(dims, row, col) {
                out[row * dims.width + col] = data[src];
            }
        }
    }
    out
}

pub fn warp_annotation(ann: &AnnotationMap, t: &Transform) -> AnnotationMap {
    AnnotationMap {
        dims: ann.dims,
        data: warp_nearest(&ann.data, ann.dims, t, Label::Unlabeled),
    }
}

pub fn warp_mask(mask: &FullMask, t: &Transform) -> FullMask {
    FullMask {
        dims: mask.dims,
        data: warp_nearest(&mask.data, mask.dims, t, 0),
    }
}

pub fn apply_transform(sample: &Sample, t: &Transform) -> Sample {
    Sample {
        id: sample.id.clone(),
        image: warp_image(&sample.image, t),
        annotation: warp_annotation(&sample.annotation, t),
        full_mask: sample.full_mask.as_ref().map(|m| warp_mask(m, t)),
    }
}

/// Applies one sampled transform to every map of the sample.
///
/// Draws nothing from `rng` when augmentation is disabled.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut Rng) -> Sample {
    if !cfg.enabled {
        return sample.clone();
    }
    let t = sample_transform(cfg, sample.image.dims, rng);
    apply_transform(sample, &t)
}

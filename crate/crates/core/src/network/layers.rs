//! CPU kernels for the segmentation graph, each with an explicit backward.
//!
//! Feature maps are single-image `[channel][row][col]` buffers. Weight
//! gradients are accumulated (`+=`) so a batch can be processed one image at
//! a time.

use rand::Rng as _;

use super::params::{Gradients, ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Feature {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn same_shape(&self, other: &Feature) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Feature) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c[m,n] = alpha * a[m,k] * b[k,n] + beta * c`, with arbitrary strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover every (row, col)
    // addressed through the given strides; `c` is a dense m x n row-major block.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution, stride 1, "same" zero padding, optional dilation.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct ConvCache {
    col: Vec<f32>,
    height: usize,
    width: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let area = kernel * kernel;
        let weight = store.add_weight(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * area,
            out_channels * area,
        );
        let bias = store.add_bias(format!("{name}.bias"), out_channels);
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Feature) -> Vec<f32> {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let k = self.kernel;
        if k == 1 {
            return x.data.clone();
        }
        let pad = (self.dilation * (k - 1) / 2) as isize;
        let mut col = vec![0.0f32; self.patch_len() * hw];
        for ci in 0..self.in_channels {
            let src = &x.data[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let oy = (ky * self.dilation) as isize - pad;
                for kx in 0..k {
                    let ox = (kx * self.dilation) as isize - pad;
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let x0 = (-ox).clamp(0, w as isize) as usize;
                    let x1 = (w as isize - ox).clamp(0, w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (sy as usize) * w;
                        let sx0 = (x0 as isize + ox) as usize;
                        dst[y * w + x0..y * w + x1].copy_from_slice(&src[s0 + sx0..s0 + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], height: usize, width: usize) -> Feature {
        let (h, w) = (height, width);
        let hw = h * w;
        let k = self.kernel;
        if k == 1 {
            return Feature {
                channels: self.in_channels,
                height,
                width,
                data: col.to_vec(),
            };
        }
        let pad = (self.dilation * (k - 1) / 2) as isize;
        let mut out = Feature::zeros(self.in_channels, h, w);
        for ci in 0..self.in_channels {
            let dst = &mut out.data[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let oy = (ky * self.dilation) as isize - pad;
                for kx in 0..k {
                    let ox = (kx * self.dilation) as isize - pad;
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let x0 = (-ox).clamp(0, w as isize) as usize;
                    let x1 = (w as isize - ox).clamp(0, w as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (sy as usize) * w;
                        let sx0 = (x0 as isize + ox) as usize;
                        let d = &mut dst[s0 + sx0..s0 + sx0 + (x1 - x0)];
                        for (a, b) in d.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *a += b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &ParamStore, x: &Feature) -> (Feature, ConvCache) {
        debug_assert_eq!(x.channels, self.in_channels);
        let hw = x.plane();
        let col = self.im2col(x);
        let mut y = Feature::zeros(self.out_channels, x.height, x.width);
        let kk = self.patch_len();
        gemm(
            self.out_channels,
            kk,
            hw,
            params.data(self.weight),
            (kk, 1),
            &col,
            (hw, 1),
            0.0,
            &mut y.data,
        );
        for (o, &b) in params.data(self.bias).iter().enumerate() {
            for v in &mut y.data[o * hw..(o + 1) * hw] {
                *v += b;
            }
        }
        (
            y,
            ConvCache {
                col,
                height: x.height,
                width: x.width,
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &ConvCache,
        dy: &Feature,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Feature> {
        let hw = cache.height * cache.width;
        let kk = self.patch_len();
        gemm(
            self.out_channels,
            hw,
            kk,
            &dy.data,
            (hw, 1),
            &cache.col,
            (1, hw),
            1.0,
            grads.data_mut(self.weight),
        );
        let db = grads.data_mut(self.bias);
        for (o, g) in db.iter_mut().enumerate() {
            *g += dy.data[o * hw..(o + 1) * hw].iter().sum::<f32>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcol = vec![0.0f32; kk * hw];
        gemm(
            kk,
            self.out_channels,
            hw,
            params.data(self.weight),
            (1, kk),
            &dy.data,
            (hw, 1),
            0.0,
            &mut dcol,
        );
        Some(self.col2im(&dcol, cache.height, cache.width))
    }
}

/// 2x2 transposed convolution with stride 2 (doubles spatial size).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct UpCache {
    input: Feature,
}

impl UpConv {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Self {
        let weight = store.add_weight(
            format!("{name}.weight"),
            vec![in_channels, out_channels, 2, 2],
            out_channels * 4,
            in_channels * 4,
        );
        let bias = store.add_bias(format!("{name}.bias"), out_channels);
        Self {
            in_channels,
            out_channels,
            weight,
            bias,
        }
    }

    pub fn forward(&self, params: &ParamStore, x: &Feature) -> (Feature, UpCache) {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let o4 = self.out_channels * 4;
        let mut taps = vec![0.0f32; o4 * hw];
        gemm(
            o4,
            self.in_channels,
            hw,
            params.data(self.weight),
            (1, o4),
            &x.data,
            (hw, 1),
            0.0,
            &mut taps,
        );
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = Feature::zeros(self.out_channels, oh, ow);
        let bias = params.data(self.bias);
        for o in 0..self.out_channels {
            for tap in 0..4 {
                let (a, b) = (tap / 2, tap % 2);
                let src = &taps[(o * 4 + tap) * hw..(o * 4 + tap + 1) * hw];
                for i in 0..h {
                    let row = &mut y.data[o * oh * ow + (2 * i + a) * ow..];
                    for j in 0..w {
                        row[2 * j + b] = src[i * w + j] + bias[o];
                    }
                }
            }
        }
        (y, UpCache { input: x.clone() })
    }

    pub fn backward(&self, params: &ParamStore, cache: &UpCache, dy: &Feature, grads: &mut Gradients) -> Feature {
        let x = &cache.input;
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let o4 = self.out_channels * 4;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dtaps = vec![0.0f32; o4 * hw];
        for o in 0..self.out_channels {
            for tap in 0..4 {
                let (a, b) = (tap / 2, tap % 2);
                let dst = &mut dtaps[(o * 4 + tap) * hw..(o * 4 + tap + 1) * hw];
                for i in 0..h {
                    let row = &dy.data[o * oh * ow + (2 * i + a) * ow..];
                    for j in 0..w {
                        dst[i * w + j] = row[2 * j + b];
                    }
                }
            }
        }
        gemm(
            self.in_channels,
            hw,
            o4,
            &x.data,
            (hw, 1),
            &dtaps,
            (1, hw),
            1.0,
            grads.data_mut(self.weight),
        );
        let db = grads.data_mut(self.bias);
        for (o, g) in db.iter_mut().enumerate() {
            *g += dy.data[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f32>();
        }
        let mut dx = Feature::zeros(self.in_channels, h, w);
        gemm(
            self.in_channels,
            o4,
            hw,
            params.data(self.weight),
            (o4, 1),
            &dtaps,
            (hw, 1),
            0.0,
            &mut dx.data,
        );
        dx
    }
}

pub fn relu_inplace(x: &mut Feature) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` by the positive part of the activation `y` that relu produced.
pub fn relu_backward(y: &Feature, dy: &mut Feature) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns pooled map and argmax offsets into the input.
pub fn max_pool2(x: &Feature) -> (Feature, Vec<u32>) {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut y = Feature::zeros(x.channels, h, w);
    let mut arg = vec![0u32; x.channels * h * w];
    for c in 0..x.channels {
        let base = c * x.height * x.width;
        for i in 0..h {
            for j in 0..w {
                let mut best = base + 2 * i * x.width + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * x.width + 2 * j + dj;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = c * h * w + i * w + j;
                y.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(dy: &Feature, arg: &[u32], input_height: usize, input_width: usize) -> Feature {
    let mut dx = Feature::zeros(dy.channels, input_height, input_width);
    for (g, &a) in dy.data.iter().zip(arg) {
        dx.data[a as usize] += g;
    }
    dx
}

/// Channel concatenation `[a; b]`.
pub fn concat(a: &Feature, b: &Feature) -> Feature {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Feature {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

pub fn split_channels(x: &Feature, first: usize) -> (Feature, Feature) {
    let cut = first * x.plane();
    (
        Feature {
            channels: first,
            height: x.height,
            width: x.width,
            data: x.data[..cut].to_vec(),
        },
        Feature {
            channels: x.channels - first,
            height: x.height,
            width: x.width,
            data: x.data[cut..].to_vec(),
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutKind {
    /// Zero whole feature channels.
    Channel,
    /// Zero individual activations.
    Element,
}

/// Inverted dropout; returns the per-entry scale that was applied.
pub fn dropout(x: &mut Feature, rate: f64, kind: DropoutKind, rng: &mut Rng) -> Vec<f32> {
    let keep = (1.0 / (1.0 - rate)) as f32;
    let draw = |rng: &mut Rng| if rng.random::<f64>() < rate { 0.0 } else { keep };
    let scale: Vec<f32> = match kind {
        DropoutKind::Channel => (0..x.channels).map(|_| draw(rng)).collect(),
        DropoutKind::Element => (0..x.data.len()).map(|_| draw(rng)).collect(),
    };
    apply_scale(x, &scale);
    scale
}

pub fn apply_scale(x: &mut Feature, scale: &[f32]) {
    if scale.len() == x.data.len() {
        for (v, s) in x.data.iter_mut().zip(scale) {
            *v *= s;
        }
    } else {
        let hw = x.plane();
        for (c, s) in scale.iter().enumerate() {
            for v in &mut x.data[c * hw..(c + 1) * hw] {
                *v *= s;
            }
        }
    }
}

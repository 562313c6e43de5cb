//! Pixel containers shared by every stage of the pipeline.
//!
//! All maps are row-major. Probability maps are stored pixel-major
//! (`[row][col][class]`), everything else holds one value per pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes handled end to end: background and foreground.
pub const N_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ensure_eq(&self, other: Dims) -> Result<()> {
        if *self != other {
            return Err(Error::shape(self, other));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// Grayscale intensity image, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub dims: Dims,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(dims.len(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.dims.width + col]
    }
}

/// Dense binary ground truth: 0 = background, 1 = foreground.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FullMask {
    pub dims: Dims,
    pub data: Vec<u8>,
}

impl FullMask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(dims.len(), data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("mask value {v} is not a class index")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![0; dims.len()],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.dims.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Per-pixel scribble label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Foreground = 1,
    Unlabeled = 2,
}

impl Label {
    /// Class index for labeled pixels.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Background => Some(0),
            Label::Foreground => Some(1),
            Label::Unlabeled => None,
        }
    }

    pub fn from_class(class: u8) -> Self {
        if class == 0 {
            Label::Background
        } else {
            Label::Foreground
        }
    }

    pub fn is_labeled(self) -> bool {
        self != Label::Unlabeled
    }
}

/// Ternary scribble supervision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationMap {
    pub dims: Dims,
    pub data: Vec<Label>,
}

impl AnnotationMap {
    pub fn new(dims: Dims, data: Vec<Label>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::shape(dims.len(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn unlabeled(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![Label::Unlabeled; dims.len()],
        }
    }

    /// Every pixel labeled with its ground-truth class.
    pub fn from_mask(mask: &FullMask) -> Self {
        Self {
            dims: mask.dims,
            data: mask.data.iter().map(|&v| Label::from_class(v)).collect(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.data[row * self.dims.width + col]
    }

    pub fn count(&self, label: Label) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }
}

/// Per-pixel class distribution, `[row][col][class]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub dims: Dims,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(dims: Dims, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() * classes {
            return Err(Error::shape(dims.len() * classes, data.len()));
        }
        Ok(Self { dims, classes, data })
    }

    /// Softmax over the class axis of pixel-major logits.
    pub fn from_logits(logits: &LogitMap) -> Self {
        let c = logits.classes;
        let mut data = vec![0.0; logits.data.len()];
        for (z, p) in logits.data.chunks_exact(c).zip(data.chunks_exact_mut(c)) {
            softmax_into(z, p);
        }
        Self {
            dims: logits.dims,
            classes: c,
            data,
        }
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.classes)
    }
}

/// Unnormalized class scores, laid out like [`ProbMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    pub dims: Dims,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl LogitMap {
    pub fn new(dims: Dims, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() * classes {
            return Err(Error::shape(dims.len() * classes, data.len()));
        }
        Ok(Self { dims, classes, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            classes: self.classes,
            data: vec![0.0; self.data.len()],
        }
    }
}

pub(crate) fn softmax_into(z: &[f64], p: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = (zi - max).exp();
        sum += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= sum;
    }
}

/// Index of the largest entry; ties resolve to the lowest class index.
pub fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

//! Dataset directory format, normalisation, augmentation and batching.
//!
//! Layout:
//!
//! ```text
//! dataset/images/<id>.png     8-bit grayscale
//! dataset/masks/<id>.png      0 = background, 255 = foreground (optional per id)
//! dataset/scribbles/<id>.png  0 = background, 255 = foreground, 127 = unlabeled
//! dataset/split.json          {"train": [..], "val": [..], "test": [..]}
//! ```

mod augment;
mod png_io;
mod split;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::synthdata::make_scribbles;
use crate::types::{AnnotationMap, Dims, FullMask, Image, Label};
pub use augment::{
    apply_transform, augment, sample_transform, warp_annotation, warp_image, warp_mask, AugmentConfig, Transform,
};
pub use png_io::{read_gray, write_gray};
pub use split::{largest_remainder, split_dataset, Split, SplitRatios, MIN_SPLIT_IDS};

pub const SCRIBBLE_BACKGROUND: u8 = 0;
pub const SCRIBBLE_FOREGROUND: u8 = 255;
pub const SCRIBBLE_UNLABELED: u8 = 127;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub annotation: AnnotationMap,
    pub full_mask: Option<FullMask>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        self.image.dims.ensure_eq(self.annotation.dims)?;
        if let Some(m) = &self.full_mask {
            self.image.dims.ensure_eq(m.dims)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
    index: HashMap<String, usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, split: Split) -> Result<Self> {
        let index: HashMap<String, usize> = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        if index.len() != samples.len() {
            return Err(Error::Invalid("duplicate sample ids".into()));
        }
        for id in split.all_ids() {
            if !index.contains_key(id) {
                return Err(Error::Invalid(format!("split id {id} has no sample")));
            }
        }
        for s in &samples {
            s.validate()?;
        }
        Ok(Self { samples, index, split })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.samples[i])
    }

    fn subset(&self, ids: &[String]) -> Vec<&Sample> {
        ids.iter().filter_map(|id| self.get(id)).collect()
    }

    pub fn train(&self) -> Vec<&Sample> {
        self.subset(&self.split.train)
    }

    pub fn val(&self) -> Vec<&Sample> {
        self.subset(&self.split.val)
    }

    pub fn test(&self) -> Vec<&Sample> {
        self.subset(&self.split.test)
    }

    /// Common image size, if every sample agrees.
    pub fn dims(&self) -> Option<Dims> {
        let first = self.samples.first()?.image.dims;
        self.samples.iter().all(|s| s.image.dims == first).then_some(first)
    }

    /// Replaces every annotation, keeping images, masks and split.
    pub fn with_annotations(&self, f: impl Fn(usize, &Sample) -> Result<AnnotationMap>) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(Sample {
                    annotation: f(i, s)?,
                    ..s.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, self.split.clone())
    }
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

pub fn scribble_path(root: &Path, id: &str) -> PathBuf {
    root.join("scribbles").join(format!("{id}.png"))
}

pub fn split_path(root: &Path) -> PathBuf {
    root.join("split.json")
}

pub fn encode_image(image: &Image) -> Vec<u8> {
    image
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn encode_mask(mask: &FullMask) -> Vec<u8> {
    mask.data.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect()
}

pub fn encode_annotation(ann: &AnnotationMap) -> Vec<u8> {
    ann.data
        .iter()
        .map(|l| match l {
            Label::Background => SCRIBBLE_BACKGROUND,
            Label::Foreground => SCRIBBLE_FOREGROUND,
            Label::Unlabeled => SCRIBBLE_UNLABELED,
        })
        .collect()
}

pub fn load_image(path: &Path) -> Result<Image> {
    let (dims, raw) = read_gray(path)?;
    Image::new(dims, raw.into_iter().map(|v| v as f32 / 255.0).collect())
}

pub fn load_mask(path: &Path) -> Result<FullMask> {
    let (dims, raw) = read_gray(path)?;
    let data = raw
        .into_iter()
        .map(|v| match v {
            0 => Ok(0),
            255 => Ok(1),
            value => Err(Error::UnknownLabelValue {
                file: path.to_path_buf(),
                value,
            }),
        })
        .collect::<Result<Vec<u8>>>()?;
    FullMask::new(dims, data)
}

pub fn load_annotation(path: &Path) -> Result<AnnotationMap> {
    let (dims, raw) = read_gray(path)?;
    let data = raw
        .into_iter()
        .map(|v| match v {
            SCRIBBLE_BACKGROUND => Ok(Label::Background),
            SCRIBBLE_FOREGROUND => Ok(Label::Foreground),
            SCRIBBLE_UNLABELED => Ok(Label::Unlabeled),
            value => Err(Error::UnknownLabelValue {
                file: path.to_path_buf(),
                value,
            }),
        })
        .collect::<Result<Vec<Label>>>()?;
    AnnotationMap::new(dims, data)
}

pub fn read_split(root: &Path) -> Result<Split> {
    let path = split_path(root);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        file: path,
        message: e.to_string(),
    })
}

pub fn write_split(root: &Path, split: &Split) -> Result<()> {
    std::fs::create_dir_all(root)?;
    std::fs::write(split_path(root), serde_json::to_string_pretty(split)?)?;
    Ok(())
}

/// Loads every id named in `split.json`. Masks are optional per id; images
/// and scribbles are required.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let split = read_split(root)?;
    let mut samples = Vec::with_capacity(split.len());
    for id in split.all_ids() {
        let image = load_image(&image_path(root, id))?;
        let annotation = load_annotation(&scribble_path(root, id))?;
        let mpath = mask_path(root, id);
        let full_mask = if mpath.is_file() {
            Some(load_mask(&mpath)?)
        } else {
            None
        };
        let sample = Sample {
            id: id.clone(),
            image,
            annotation,
            full_mask,
        };
        sample.validate().map_err(|e| Error::Load {
            file: scribble_path(root, id),
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Dataset::new(samples, split)
}

pub fn save_sample(root: &Path, sample: &Sample) -> Result<()> {
    sample.validate()?;
    let dims = sample.image.dims;
    write_gray(&image_path(root, &sample.id), dims, &encode_image(&sample.image))?;
    write_gray(
        &scribble_path(root, &sample.id),
        dims,
        &encode_annotation(&sample.annotation),
    )?;
    if let Some(mask) = &sample.full_mask {
        write_gray(&mask_path(root, &sample.id), dims, &encode_mask(mask))?;
    }
    Ok(())
}

pub fn save_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    for s in dataset.samples() {
        save_sample(root, s)?;
    }
    write_split(root, &dataset.split)
}

/// Sample id for the `index`-th generated image.
pub fn sample_id(index: usize) -> String {
    format!("img_{index:04}")
}

/// Wraps generated pairs into a split dataset with scribbles at the given
/// coverage. Scribbles for image `i` use `derive_seed(scribble_seed, i)`.
pub fn synthetic_dataset(
    pairs: Vec<(Image, FullMask)>,
    coverage: f64,
    bg_coverage: f64,
    ratios: SplitRatios,
    split_seed: u64,
    scribble_seed: u64,
) -> Result<Dataset> {
    let ids: Vec<String> = (0..pairs.len()).map(sample_id).collect();
    let split = split_dataset(&ids, ratios, split_seed)?;
    let samples = pairs
        .into_iter()
        .zip(ids)
        .enumerate()
        .map(|(i, ((image, mask), id))| {
            Ok(Sample {
                annotation: make_scribbles(&mask, coverage, bg_coverage, derive_seed(scribble_seed, i as u64))?,
                id,
                image,
                full_mask: Some(mask),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, split)
}

/// Regenerates every annotation from the sample's full mask.
pub fn rescribble(dataset: &Dataset, coverage: f64, bg_coverage: f64, scribble_seed: u64) -> Result<Dataset> {
    dataset.with_annotations(|index, s| {
        let mask = s
            .full_mask
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("sample {} has no full mask to scribble from", s.id)))?;
        make_scribbles(mask, coverage, bg_coverage, derive_seed(scribble_seed, index as u64))
    })
}

/// Per-image min-max scaling to `[0, 1]`; constant images map to zeros.
pub fn normalize(image: &Image) -> Image {
    let (lo, hi) = image
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        image.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; image.data.len()]
    };
    Image { dims: image.dims, data }
}

/// A batch of equally-sized samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub annotations: Vec<AnnotationMap>,
    pub masks: Vec<Option<FullMask>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images flattened as `[B, H, W, 1]`.
    pub fn images_tensor(&self) -> ([usize; 4], Vec<f32>) {
        let dims = self.images.first().map(|i| i.dims).unwrap_or(Dims::new(0, 0));
        let data = self.images.iter().flat_map(|i| i.data.iter().copied()).collect();
        ([self.len(), dims.height, dims.width, 1], data)
    }

    /// Annotations flattened as `[B, H, W]` of class ids, 2 = unlabeled.
    pub fn annotations_tensor(&self) -> ([usize; 3], Vec<u8>) {
        let dims = self.annotations.first().map(|a| a.dims).unwrap_or(Dims::new(0, 0));
        let data = self
            .annotations
            .iter()
            .flat_map(|a| a.data.iter().map(|&l| l as u8))
            .collect();
        ([self.len(), dims.height, dims.width], data)
    }
}

/// Preprocessing applied when a sample enters a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub normalize: bool,
    pub augment: Option<AugmentConfig>,
}

/// Normalises, then augments if configured.
pub fn prepare(sample: &Sample, pre: &Preprocess, rng: &mut Rng) -> Sample {
    let mut s = sample.clone();
    if pre.normalize {
        s.image = normalize(&s.image);
    }
    match &pre.augment {
        Some(cfg) => augment(&s, cfg, rng),
        None => s,
    }
}

/// Single-consumer batch iterator over one epoch.
///
/// The visiting order is drawn from `order_rng` up front; augmentation draws
/// from `augment_rng` in that order, so a fixed pair of seeds fixes the stream.
pub struct BatchStream<'a, 'r> {
    samples: Vec<&'a Sample>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    pre: Preprocess,
    augment_rng: &'r mut Rng,
}

impl<'a, 'r> BatchStream<'a, 'r> {
    pub fn new(
        samples: Vec<&'a Sample>,
        batch_size: usize,
        shuffle: Option<&mut Rng>,
        pre: Preprocess,
        augment_rng: &'r mut Rng,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if let Some(rng) = shuffle {
            use rand::seq::SliceRandom;
            order.shuffle(rng);
        }
        Ok(Self {
            samples,
            order,
            batch_size,
            cursor: 0,
            pre,
            augment_rng,
        })
    }

    pub fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchStream<'_, '_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut batch = Batch {
            ids: Vec::new(),
            images: Vec::new(),
            annotations: Vec::new(),
            masks: Vec::new(),
        };
        for &i in &self.order[self.cursor..end] {
            let s = prepare(self.samples[i], &self.pre, self.augment_rng);
            batch.ids.push(s.id);
            batch.images.push(s.image);
            batch.annotations.push(s.annotation);
            batch.masks.push(s.full_mask);
        }
        self.cursor = end;
        Some(batch)
    }
}

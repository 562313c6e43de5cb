use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{normalize, Sample};
use crate::error::{Error, Result};
use crate::network::ModelState;
use crate::types::{AnnotationMap, FullMask, Image, N_CLASSES};

/// Per-class IoU of one prediction and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouScores {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// IoU per class. A class absent from both masks scores 1.
pub fn miou(pred: &FullMask, gt: &FullMask) -> Result<IouScores> {
    pred.dims.ensure_eq(gt.dims)?;
    let mut inter = [0usize; N_CLASSES];
    let mut union = [0usize; N_CLASSES];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        for c in 0..N_CLASSES as u8 {
            let (a, b) = (p == c, g == c);
            inter[c as usize] += (a && b) as usize;
            union[c as usize] += (a || b) as usize;
        }
    }
    let per_class: Vec<f64> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .collect();
    let mean = per_class.iter().sum::<f64>() / N_CLASSES as f64;
    Ok(IouScores { per_class, mean })
}

/// Fraction of annotated pixels whose prediction matches the annotation.
/// `None` when nothing is annotated.
pub fn labeled_accuracy(pred: &FullMask, ann: &AnnotationMap) -> Result<Option<f64>> {
    pred.dims.ensure_eq(ann.dims)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, l) in pred.data.iter().zip(&ann.data) {
        if let Some(c) = l.class() {
            total += 1;
            hit += (c == p as usize) as usize;
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub iou: IouScores,
}

/// Scores of a model over a set of images. `miou` is the mean over images
/// of each image's class-mean IoU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_image: Vec<ImageScore>,
    pub miou: f64,
    pub n_images: usize,
}

impl EvalResult {
    pub fn from_scores(per_image: Vec<ImageScore>) -> Self {
        let n_images = per_image.len();
        let miou = if n_images == 0 {
            0.0
        } else {
            per_image.iter().map(|s| s.iou.mean).sum::<f64>() / n_images as f64
        };
        Self {
            per_image,
            miou,
            n_images,
        }
    }

    /// Mean IoU of one class over images.
    pub fn class_mean(&self, class: usize) -> f64 {
        if self.n_images == 0 {
            return 0.0;
        }
        self.per_image.iter().map(|s| s.iou.per_class[class]).sum::<f64>() / self.n_images as f64
    }
}

/// Network input for an image, matching how the model was trained.
pub fn model_input(image: &Image, normalize_input: bool) -> Image {
    if normalize_input {
        normalize(image)
    } else {
        image.clone()
    }
}

/// Segments every sample with the main decoder and scores it against its full mask.
pub fn evaluate(model: &ModelState, samples: &[&Sample], normalize_input: bool) -> Result<EvalResult> {
    if let Some(s) = samples.iter().find(|s| s.full_mask.is_none()) {
        return Err(Error::Invalid(format!(
            "sample {} has no full mask to evaluate against",
            s.id
        )));
    }
    let per_image = samples
        .par_iter()
        .map(|s| {
            let pred = model.segment(&model_input(&s.image, normalize_input))?;
            let gt = s.full_mask.as_ref().expect("checked above");
            Ok(ImageScore {
                id: s.id.clone(),
                iou: miou(&pred, gt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_scores(per_image))
}

/// Mean labeled-pixel accuracy over samples that carry any annotation.
pub fn evaluate_labeled_accuracy(model: &ModelState, samples: &[&Sample], normalize_input: bool) -> Result<f64> {
    let scores = samples
        .par_iter()
        .map(|s| {
            let pred = model.segment(&model_input(&s.image, normalize_input))?;
            labeled_accuracy(&pred, &s.annotation)
        })
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<f64> = scores.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::Invalid("no annotated pixels to validate against".into()));
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

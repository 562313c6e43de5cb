//! Single-decoder weak-supervision regularisers used as comparison baselines.

use super::{GradAcc, Posterior, Regularizer};
use crate::error::Result;
use crate::types::{AnnotationMap, Image, ProbMap};

/// Weight of the total-variation smoothness term inside Mumford-Shah.
pub const MUMFORD_SHAH_TV_WEIGHT: f64 = 1e-4;

const FOREGROUND: usize = 1;

fn entropy_term(post: &Posterior, ann: &AnnotationMap, scale: f64, grad: Option<&mut GradAcc>) -> f64 {
    let c = post.prob.classes;
    let unlabeled: Vec<usize> = (0..ann.data.len()).filter(|&i| !ann.data[i].is_labeled()).collect();
    if unlabeled.is_empty() {
        return 0.0;
    }
    let n = unlabeled.len() as f64;
    let mut total = 0.0;
    for &i in &unlabeled {
        for k in 0..c {
            let p = post.prob.data[i * c + k];
            if p > 0.0 {
                total -= p * post.log_prob[i * c + k];
            }
        }
    }
    if let Some(g) = grad {
        for &i in &unlabeled {
            for k in 0..c {
                let p = post.prob.data[i * c + k];
                // d(-p log p)/dp = -(log p + 1); the constant vanishes through the softmax.
                let lp = if p > 0.0 { post.log_prob[i * c + k] } else { 0.0 };
                g.dprob[i * c + k] -= scale * lp / n;
            }
        }
    }
    total / n
}

/// Subgradient of `|x|` that is zero at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn tv_term(prob: &ProbMap, scale: f64, grad: Option<&mut GradAcc>) -> f64 {
    let (h, w) = (prob.dims.height, prob.dims.width);
    let c = prob.classes;
    let n = (h * w) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let fg = |r: usize, col: usize| prob.data[(r * w + col) * c + FOREGROUND];
    let mut total = 0.0;
    let mut grad = grad;
    for r in 0..h {
        for col in 0..w {
            let here = fg(r, col);
            for (rr, cc) in [(r + 1, col), (r, col + 1)] {
                if rr >= h || cc >= w {
                    continue;
                }
                let diff = fg(rr, cc) - here;
                total += diff.abs();
                if let Some(g) = grad.as_deref_mut() {
                    let s = scale * sign(diff) / n;
                    g.dprob[(rr * w + cc) * c + FOREGROUND] += s;
                    g.dprob[(r * w + col) * c + FOREGROUND] -= s;
                }
            }
        }
    }
    total / n
}

fn mumford_shah_term(post: &Posterior, image: &Image, scale: f64, grad: Option<&mut GradAcc>) -> f64 {
    let prob = &post.prob;
    let c = prob.classes;
    let n = prob.dims.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut grad = grad;
    for k in 0..c {
        let mass: f64 = (0..prob.dims.len()).map(|i| prob.data[i * c + k]).sum();
        let mean = if mass > 0.0 {
            (0..prob.dims.len())
                .map(|i| prob.data[i * c + k] * image.data[i] as f64)
                .sum::<f64>()
                / mass
        } else {
            0.0
        };
        for i in 0..prob.dims.len() {
            let dev = image.data[i] as f64 - mean;
            total += prob.data[i * c + k] * dev * dev / n;
            // The mean's own dependence on p cancels: sum_i p_i (I_i - mean) = 0.
            if let Some(g) = grad.as_deref_mut() {
                g.dprob[i * c + k] += scale * dev * dev / n;
            }
        }
    }
    total + MUMFORD_SHAH_TV_WEIGHT * tv_term(prob, scale * MUMFORD_SHAH_TV_WEIGHT, grad)
}

pub(super) fn regularizer_term(
    kind: Regularizer,
    post: &Posterior,
    ann: &AnnotationMap,
    image: &Image,
    scale: f64,
    grad: Option<&mut GradAcc>,
) -> f64 {
    match kind {
        Regularizer::EntropyMin => entropy_term(post, ann, scale, grad),
        Regularizer::TotalVariation => tv_term(&post.prob, scale, grad),
        Regularizer::MumfordShah => mumford_shah_term(post, image, scale, grad),
        Regularizer::SharedConsistency { .. } | Regularizer::None => 0.0,
    }
}

/// Mean Shannon entropy of the posterior over unlabeled pixels.
pub fn entropy_min_loss(prob: &ProbMap, ann: &AnnotationMap) -> Result<f64> {
    prob.dims.ensure_eq(ann.dims)?;
    Ok(entropy_term(&Posterior::from_probs(prob), ann, 1.0, None))
}

/// Mean anisotropic total variation of the foreground channel.
///
/// `ann` is accepted for a uniform signature; every pixel contributes.
pub fn total_variation_loss(prob: &ProbMap, ann: &AnnotationMap) -> Result<f64> {
    prob.dims.ensure_eq(ann.dims)?;
    Ok(tv_term(prob, 1.0, None))
}

/// Two-phase piecewise-constant Mumford-Shah energy with a small TV term.
pub fn mumford_shah_loss(image: &Image, prob: &ProbMap, ann: &AnnotationMap) -> Result<f64> {
    prob.dims.ensure_eq(ann.dims)?;
    prob.dims.ensure_eq(image.dims)?;
    Ok(mumford_shah_term(&Posterior::from_probs(prob), image, 1.0, None))
}

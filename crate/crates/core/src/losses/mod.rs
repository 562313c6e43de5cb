//! Training objectives on per-pixel class posteriors.
//!
//! Every term is evaluated in `f64` and differentiated analytically with
//! respect to the decoder logits. Terms of the form `-log p_target` write
//! their gradient directly in logit space (`p - onehot`); the remaining terms
//! produce a gradient with respect to the probabilities, which is pushed
//! through the softmax Jacobian at the end.
//!
//! Pseudo-labels are hard class maps. They are recomputed from the current
//! posteriors but never differentiated through.

mod baselines;

use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{argmax_low, AnnotationMap, Dims, FullMask, Image, LogitMap, ProbMap};

pub use baselines::{entropy_min_loss, mumford_shah_loss, total_variation_loss, MUMFORD_SHAH_TV_WEIGHT};

/// Convex weights over the `K` decoders, main decoder first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights(Vec<f64>);

impl MixWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("lambda", "at least one weight is required"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("lambda", "weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("lambda", format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    /// All mass on decoder `d`.
    pub fn unit(k: usize, d: usize) -> Self {
        let mut w = vec![0.0; k];
        w[d] = 1.0;
        Self(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Weight of `a` when only the pair `(a, b)` is mixed.
    pub fn pair_weight(&self, a: usize, b: usize) -> f64 {
        let total = self.0[a] + self.0[b];
        if total > 0.0 {
            self.0[a] / total
        } else {
            0.5
        }
    }
}

/// Main-decoder weight fixed at `lambda_main`; the remaining `K - 1` weights
/// are uniform on the simplex scaled to `1 - lambda_main`.
pub fn sample_mix_weights(k: usize, lambda_main: f64, rng: &mut Rng) -> Result<MixWeights> {
    if k == 0 {
        return Err(Error::config("arch.n_decoders", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&lambda_main) {
        return Err(Error::config("train.lambda_main", "must lie in [0, 1]"));
    }
    if k == 1 {
        if lambda_main != 1.0 {
            return Err(Error::config(
                "train.lambda_main",
                format!("a single decoder needs lambda_main = 1, got {lambda_main}"),
            ));
        }
        return Ok(MixWeights(vec![1.0]));
    }
    let draws: Vec<f64> = (1..k).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    let rest = 1.0 - lambda_main;
    let mut w = Vec::with_capacity(k);
    w.push(lambda_main);
    let mut acc = lambda_main;
    for (i, x) in draws.iter().enumerate() {
        if i + 2 == k {
            // Close the simplex exactly.
            w.push((1.0 - acc).max(0.0));
        } else {
            let v = rest * x / total;
            acc += v;
            w.push(v);
        }
    }
    Ok(MixWeights(w))
}

/// Weights actually used for a run: a single decoder always gets weight one.
pub fn sample_step_weights(k: usize, lambda_main: f64, rng: &mut Rng) -> Result<MixWeights> {
    sample_mix_weights(k, if k == 1 { 1.0 } else { lambda_main }, rng)
}

/// Hard class map produced from a mixture of decoder posteriors.
///
/// Carries no gradient: losses that consume it treat it as a constant target.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub labels: FullMask,
    /// Decoders that were mixed.
    pub decoders: Vec<usize>,
    /// Their mixing weights, in the same order.
    pub weights: Vec<f64>,
}

fn check_same_dims(probs: &[ProbMap]) -> Result<Dims> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Invalid("no probability maps".into()))?;
    for p in probs {
        first.dims.ensure_eq(p.dims)?;
        if p.classes != first.classes {
            return Err(Error::shape(first.classes, p.classes));
        }
    }
    Ok(first.dims)
}

/// Pixelwise convex combination of the decoder posteriors.
pub fn mix_probs(probs: &[ProbMap], weights: &MixWeights) -> Result<ProbMap> {
    check_same_dims(probs)?;
    if probs.len() != weights.len() {
        return Err(Error::shape(format!("{} weights", probs.len()), weights.len()));
    }
    let mut data = vec![0.0; probs[0].data.len()];
    for (p, &w) in probs.iter().zip(weights.as_slice()) {
        for (m, v) in data.iter_mut().zip(&p.data) {
            *m += w * v;
        }
    }
    ProbMap::new(probs[0].dims, probs[0].classes, data)
}

/// Argmax of the weighted mixture, ties toward background.
pub fn mix_and_harden(probs: &[ProbMap], weights: &MixWeights) -> Result<PseudoLabel> {
    let mixed = mix_probs(probs, weights)?;
    Ok(PseudoLabel {
        labels: FullMask {
            dims: mixed.dims,
            data: mixed.pixels().map(|p| argmax_low(p) as u8).collect(),
        },
        decoders: (0..probs.len()).collect(),
        weights: weights.as_slice().to_vec(),
    })
}

/// Pseudo-label of every unordered decoder pair `(a, b)`, `a < b`, mixed with
/// the pair-renormalised weights.
pub fn pair_pseudo_labels(probs: &[ProbMap], weights: &MixWeights) -> Result<Vec<PseudoLabel>> {
    check_same_dims(probs)?;
    let k = probs.len();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let wa = weights.pair_weight(a, b);
            let pair = [probs[a].clone(), probs[b].clone()];
            let mut pl = mix_and_harden(&pair, &MixWeights(vec![wa, 1.0 - wa]))?;
            pl.decoders = vec![a, b];
            out.push(pl);
        }
    }
    Ok(out)
}

/// Distance between a decoder pair inside the shared-consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Cross-entropy of both decoders against the pair's hard pseudo-label.
    #[default]
    CrossEntropy,
    /// Squared difference of the two soft maps.
    Mse,
}

/// Regulariser occupying the consistency slot of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regularizer {
    SharedConsistency {
        #[serde(default)]
        distance: Distance,
    },
    EntropyMin,
    TotalVariation,
    MumfordShah,
    None,
}

impl Default for Regularizer {
    fn default() -> Self {
        Regularizer::SharedConsistency {
            distance: Distance::CrossEntropy,
        }
    }
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::SharedConsistency { .. } => "shared_consistency",
            Regularizer::EntropyMin => "entropy_min",
            Regularizer::TotalVariation => "total_variation",
            Regularizer::MumfordShah => "mumford_shah",
            Regularizer::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_cons: f64,
    pub l_total: f64,
    pub gamma: f64,
}

impl LossBreakdown {
    pub fn compose(l_sup: f64, l_cons: f64, gamma: f64) -> Self {
        Self {
            l_sup,
            l_cons,
            l_total: l_sup + gamma * l_cons,
            gamma,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_sup.is_finite() && self.l_cons.is_finite() && self.l_total.is_finite()
    }
}

/// Posterior of one decoder with its log, plus gradient accumulators.
pub(crate) struct Posterior {
    pub prob: ProbMap,
    pub log_prob: Vec<f64>,
}

impl Posterior {
    fn from_logits(logits: &LogitMap) -> Self {
        let prob = ProbMap::from_logits(logits);
        let c = logits.classes;
        let mut log_prob = vec![0.0; logits.data.len()];
        for (z, lp) in logits.data.chunks_exact(c).zip(log_prob.chunks_exact_mut(c)) {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in lp.iter_mut().zip(z) {
                *o = v - lse;
            }
        }
        Self { prob, log_prob }
    }

    fn from_probs(prob: &ProbMap) -> Self {
        Self {
            prob: prob.clone(),
            log_prob: prob.data.iter().map(|p| p.ln()).collect(),
        }
    }
}

pub(crate) struct GradAcc {
    pub dlogit: Vec<f64>,
    pub dprob: Vec<f64>,
}

impl GradAcc {
    fn new(len: usize) -> Self {
        Self {
            dlogit: vec![0.0; len],
            dprob: vec![0.0; len],
        }
    }

    /// `scale * (p - onehot(target))` at pixel `i`: the logit gradient of `-scale * log p_target`.
    fn add_ce(&mut self, post: &Posterior, i: usize, target: usize, scale: f64) {
        let c = post.prob.classes;
        for k in 0..c {
            let y = if k == target { 1.0 } else { 0.0 };
            self.dlogit[i * c + k] += scale * (post.prob.data[i * c + k] - y);
        }
    }

    fn finish(self, post: &Posterior) -> Vec<f64> {
        let c = post.prob.classes;
        let mut out = self.dlogit;
        for ((o, g), p) in out
            .chunks_exact_mut(c)
            .zip(self.dprob.chunks_exact(c))
            .zip(post.prob.data.chunks_exact(c))
        {
            let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            for k in 0..c {
                o[k] += p[k] * (g[k] - dot);
            }
        }
        out
    }
}

fn pce_term(post: &Posterior, ann: &AnnotationMap, scale: f64, grad: Option<&mut GradAcc>) -> f64 {
    let c = post.prob.classes;
    let labeled = ann.data.iter().filter(|l| l.is_labeled()).count();
    if labeled == 0 {
        return 0.0;
    }
    let n = labeled as f64;
    let value = ann
        .data
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.class().map(|y| -post.log_prob[i * c + y]))
        .sum::<f64>()
        / n;
    if let Some(g) = grad {
        for (i, l) in ann.data.iter().enumerate() {
            if let Some(y) = l.class() {
                g.add_ce(post, i, y, scale / n);
            }
        }
    }
    value
}

/// Mean of `-log p(annotated class)` over labeled pixels; zero if none are labeled.
pub fn partial_cross_entropy(prob: &ProbMap, ann: &AnnotationMap) -> Result<f64> {
    prob.dims.ensure_eq(ann.dims)?;
    Ok(pce_term(&Posterior::from_probs(prob), ann, 1.0, None))
}

fn consistency_term(
    posts: &[Posterior],
    ann: &AnnotationMap,
    labels: &[PseudoLabel],
    distance: Distance,
    scale: f64,
    mut grads: Option<&mut [GradAcc]>,
) -> f64 {
    let k = posts.len();
    if k < 2 || labels.is_empty() {
        return 0.0;
    }
    let unlabeled: Vec<usize> = ann
        .data
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_labeled())
        .map(|(i, _)| i)
        .collect();
    if unlabeled.is_empty() {
        return 0.0;
    }
    let c = posts[0].prob.classes;
    let norm = 1.0 / (k as f64 * labels.len() as f64 * unlabeled.len() as f64);
    let mut total = 0.0;
    for pl in labels {
        let (a, b) = (pl.decoders[0], pl.decoders[1]);
        for &i in &unlabeled {
            match distance {
                Distance::CrossEntropy => {
                    let y = pl.labels.data[i] as usize;
                    total += -posts[a].log_prob[i * c + y] - posts[b].log_prob[i * c + y];
                    if let Some(g) = grads.as_deref_mut() {
                        g[a].add_ce(&posts[a], i, y, scale * norm);
                        g[b].add_ce(&posts[b], i, y, scale * norm);
                    }
                }
                Distance::Mse => {
                    for cl in 0..c {
                        let diff = posts[a].prob.data[i * c + cl] - posts[b].prob.data[i * c + cl];
                        total += diff * diff;
                        if let Some(g) = grads.as_deref_mut() {
                            g[a].dprob[i * c + cl] += scale * norm * 2.0 * diff;
                            g[b].dprob[i * c + cl] -= scale * norm * 2.0 * diff;
                        }
                    }
                }
            }
        }
    }
    total * norm
}

/// Pairwise shared consistency on unlabeled pixels with explicit weights.
///
/// Normalised as `(1/K) * mean over pairs * mean over unlabeled pixels`.
pub fn shared_consistency_with(
    probs: &[ProbMap],
    ann: &AnnotationMap,
    weights: &MixWeights,
    distance: Distance,
) -> Result<f64> {
    if probs.len() < 2 {
        return Ok(0.0);
    }
    let dims = check_same_dims(probs)?;
    dims.ensure_eq(ann.dims)?;
    let labels = pair_pseudo_labels(probs, weights)?;
    let posts: Vec<Posterior> = probs.iter().map(Posterior::from_probs).collect();
    Ok(consistency_term(&posts, ann, &labels, distance, 1.0, None))
}

/// Shared consistency with freshly drawn mixing weights.
pub fn shared_consistency(probs: &[ProbMap], ann: &AnnotationMap, rng: &mut Rng, lambda_main: f64) -> Result<f64> {
    if probs.len() < 2 {
        return Ok(0.0);
    }
    let weights = sample_mix_weights(probs.len(), lambda_main, rng)?;
    shared_consistency_with(probs, ann, &weights, Distance::CrossEntropy)
}

/// Consistency value and logit gradients for fixed pseudo-labels.
///
/// The labels are constants here, which is exactly how the full objective
/// treats them.
pub fn consistency_given_labels(
    logits: &[LogitMap],
    ann: &AnnotationMap,
    labels: &[PseudoLabel],
    distance: Distance,
) -> Result<(f64, Vec<LogitMap>)> {
    for l in logits {
        l.dims.ensure_eq(ann.dims)?;
    }
    let posts: Vec<Posterior> = logits.iter().map(Posterior::from_logits).collect();
    let mut grads: Vec<GradAcc> = logits.iter().map(|l| GradAcc::new(l.data.len())).collect();
    let value = consistency_term(&posts, ann, labels, distance, 1.0, Some(&mut grads));
    let out = grads
        .into_iter()
        .zip(&posts)
        .zip(logits)
        .map(|((g, p), l)| LogitMap {
            dims: l.dims,
            classes: l.classes,
            data: g.finish(p),
        })
        .collect();
    Ok((value, out))
}

/// `l_sup = (1/K) sum_d pCE(p_d)`, `l_cons` from shared consistency,
/// `l_total = l_sup + gamma * l_cons`.
pub fn combined_loss(
    probs: &[ProbMap],
    ann: &AnnotationMap,
    gamma: f64,
    rng: &mut Rng,
    lambda_main: f64,
) -> Result<LossBreakdown> {
    let weights = sample_step_weights(probs.len(), lambda_main, rng)?;
    combined_loss_with(probs, ann, gamma, &weights)
}

pub fn combined_loss_with(
    probs: &[ProbMap],
    ann: &AnnotationMap,
    gamma: f64,
    weights: &MixWeights,
) -> Result<LossBreakdown> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(Error::config("train.gamma", "must be finite and nonnegative"));
    }
    let k = probs.len() as f64;
    let mut l_sup = 0.0;
    for p in probs {
        l_sup += partial_cross_entropy(p, ann)?;
    }
    l_sup /= k;
    let l_cons = shared_consistency_with(probs, ann, weights, Distance::CrossEntropy)?;
    Ok(LossBreakdown::compose(l_sup, l_cons, gamma))
}

/// The full training objective with analytic gradients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub gamma: f64,
    pub regularizer: Regularizer,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            regularizer: Regularizer::default(),
        }
    }
}

impl Objective {
    /// Loss breakdown for one image and `d l_total / d logits` for every decoder.
    ///
    /// `image` is only read by the Mumford-Shah regulariser.
    pub fn evaluate(
        &self,
        logits: &[LogitMap],
        ann: &AnnotationMap,
        image: &Image,
        weights: &MixWeights,
    ) -> Result<(LossBreakdown, Vec<LogitMap>)> {
        if logits.is_empty() {
            return Err(Error::Invalid("no decoder outputs".into()));
        }
        if weights.len() != logits.len() {
            return Err(Error::shape(format!("{} mixing weights", logits.len()), weights.len()));
        }
        for l in logits {
            l.dims.ensure_eq(ann.dims)?;
        }
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::config("train.gamma", "must be finite and nonnegative"));
        }
        let k = logits.len() as f64;
        let posts: Vec<Posterior> = logits.iter().map(Posterior::from_logits).collect();
        let mut grads: Vec<GradAcc> = logits.iter().map(|l| GradAcc::new(l.data.len())).collect();

        let mut l_sup = 0.0;
        for (post, g) in posts.iter().zip(grads.iter_mut()) {
            l_sup += pce_term(post, ann, 1.0 / k, Some(g));
        }
        l_sup /= k;

        let l_cons = match self.regularizer {
            Regularizer::SharedConsistency { distance } => {
                let probs: Vec<ProbMap> = posts.iter().map(|p| p.prob.clone()).collect();
                let labels = if probs.len() > 1 {
                    pair_pseudo_labels(&probs, weights)?
                } else {
                    Vec::new()
                };
                consistency_term(&posts, ann, &labels, distance, self.gamma, Some(&mut grads))
            }
            Regularizer::None => 0.0,
            other => {
                if other == Regularizer::MumfordShah {
                    image.dims.ensure_eq(ann.dims)?;
                }
                let mut sum = 0.0;
                for (post, g) in posts.iter().zip(grads.iter_mut()) {
                    sum += baselines::regularizer_term(other, post, ann, image, self.gamma / k, Some(g));
                }
                sum / k
            }
        };

        let out = grads
            .into_iter()
            .zip(&posts)
            .zip(logits)
            .map(|((g, p), l)| LogitMap {
                dims: l.dims,
                classes: l.classes,
                data: g.finish(p),
            })
            .collect();
        Ok((LossBreakdown::compose(l_sup, l_cons, self.gamma), out))
    }
}

#[cfg(test)]
mod tests;

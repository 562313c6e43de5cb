use approx::assert_relative_eq;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::rng::rng_from_seed;
use crate::types::{Dims, Label};

fn pm(dims: Dims, pixels: &[[f64; 2]]) -> ProbMap {
    ProbMap::new(dims, 2, pixels.iter().flatten().copied().collect()).unwrap()
}

fn ann(dims: Dims, labels: &[Label]) -> AnnotationMap {
    AnnotationMap::new(dims, labels.to_vec()).unwrap()
}

fn random_logits(dims: Dims, rng: &mut Rng, scale: f64) -> LogitMap {
    let data = (0..dims.len() * 2)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect::<Vec<f64>>();
    LogitMap::new(dims, 2, data).unwrap()
}

fn random_ann(dims: Dims, rng: &mut Rng) -> AnnotationMap {
    let data = (0..dims.len())
        .map(|_| match rng.random_range(0..3) {
            0 => Label::Background,
            1 => Label::Foreground,
            _ => Label::Unlabeled,
        })
        .collect();
    AnnotationMap::new(dims, data).unwrap()
}

#[test]
fn pce_perfect_prediction_is_zero() {
    let d = Dims::new(1, 3);
    let p = pm(d, &[[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]]);
    let a = ann(d, &[Label::Background, Label::Foreground, Label::Unlabeled]);
    assert_eq!(partial_cross_entropy(&p, &a).unwrap(), 0.0);
}

#[test]
fn pce_two_labeled_pixels() {
    let d = Dims::new(1, 3);
    let p = pm(d, &[[0.8, 0.2], [0.5, 0.5], [0.1, 0.9]]);
    let a = ann(d, &[Label::Background, Label::Foreground, Label::Unlabeled]);
    let expected = (-(0.8f64).ln() - (0.5f64).ln()) / 2.0;
    assert_relative_eq!(partial_cross_entropy(&p, &a).unwrap(), expected, epsilon = 1e-15);
    assert_relative_eq!(expected, 0.458_145_365_937_078, epsilon = 1e-12);
}

#[test]
fn pce_ignores_unlabeled_and_handles_empty() {
    let d = Dims::new(1, 2);
    let a = ann(d, &[Label::Foreground, Label::Unlabeled]);
    let p1 = pm(d, &[[0.4, 0.6], [0.9, 0.1]]);
    let p2 = pm(d, &[[0.4, 0.6], [0.0, 1.0]]);
    assert_eq!(
        partial_cross_entropy(&p1, &a).unwrap(),
        partial_cross_entropy(&p2, &a).unwrap()
    );
    let none = AnnotationMap::unlabeled(d);
    assert_eq!(partial_cross_entropy(&p1, &none).unwrap(), 0.0);
}

#[test]
fn mix_weights_single_decoder() {
    let mut rng = rng_from_seed(0);
    assert_eq!(sample_mix_weights(1, 1.0, &mut rng).unwrap().as_slice(), &[1.0]);
    assert!(matches!(
        sample_mix_weights(1, 0.5, &mut rng),
        Err(Error::Config { .. })
    ));
}

#[test]
fn mix_weights_scale_to_remaining_mass() {
    let mut rng = rng_from_seed(1);
    for _ in 0..100 {
        let w = sample_mix_weights(3, 0.5, &mut rng).unwrap();
        assert_eq!(w.as_slice()[0], 0.5);
        assert!((w.as_slice()[1] + w.as_slice()[2] - 0.5).abs() < 1e-15);
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// Uniform on the 1-simplex scaled by 0.5 has mean 0.25 per coordinate.
#[test]
fn mix_weights_monte_carlo_mean() {
    let mut rng = rng_from_seed(2);
    let n = 10_000;
    let mean = (0..n)
        .map(|_| sample_mix_weights(3, 0.5, &mut rng).unwrap().as_slice()[1])
        .sum::<f64>()
        / n as f64;
    assert!((mean - 0.25).abs() < 0.01, "{mean}");
}

#[test]
fn harden_at_unit_weights_follows_that_decoder() {
    let d = Dims::new(1, 2);
    let probs = [pm(d, &[[0.7, 0.3], [0.2, 0.8]]), pm(d, &[[0.1, 0.9], [0.6, 0.4]])];
    assert_eq!(
        mix_and_harden(&probs, &MixWeights::unit(2, 0)).unwrap().labels.data,
        vec![0, 1]
    );
    assert_eq!(
        mix_and_harden(&probs, &MixWeights::unit(2, 1)).unwrap().labels.data,
        vec![1, 0]
    );
}

#[test]
fn harden_two_decoder_example() {
    let d = Dims::new(1, 1);
    let probs = [pm(d, &[[0.7, 0.3]]), pm(d, &[[0.2, 0.8]])];
    let w = MixWeights::new(vec![0.5, 0.5]).unwrap();
    let mixed = mix_probs(&probs, &w).unwrap();
    assert_relative_eq!(mixed.data[0], 0.45, epsilon = 1e-15);
    assert_relative_eq!(mixed.data[1], 0.55, epsilon = 1e-15);
    assert_eq!(mix_and_harden(&probs, &w).unwrap().labels.data, vec![1]);
}

#[test]
fn harden_identical_decoders_is_fixed_point() {
    let d = Dims::new(2, 2);
    let p = pm(d, &[[0.7, 0.3], [0.2, 0.8], [0.5, 0.5], [0.49, 0.51]]);
    let mut rng = rng_from_seed(3);
    for _ in 0..20 {
        let w = sample_mix_weights(3, rng.random::<f64>(), &mut rng).unwrap();
        let pl = mix_and_harden(&[p.clone(), p.clone(), p.clone()], &w).unwrap();
        assert_eq!(pl.labels.data, vec![0, 1, 0, 1]);
    }
}

#[test]
fn consistency_zero_for_agreeing_confident_decoders() {
    let d = Dims::new(1, 3);
    let p = pm(d, &[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
    let a = AnnotationMap::unlabeled(d);
    let mut rng = rng_from_seed(4);
    assert_eq!(
        shared_consistency(&[p.clone(), p.clone(), p.clone()], &a, &mut rng, 0.5).unwrap(),
        0.0
    );
    assert_eq!(
        shared_consistency(std::slice::from_ref(&p), &a, &mut rng, 0.5).unwrap(),
        0.0
    );
}

#[test]
fn consistency_single_pixel_example() {
    let d = Dims::new(1, 1);
    let probs = [pm(d, &[[0.9, 0.1]]), pm(d, &[[0.6, 0.4]])];
    let a = AnnotationMap::unlabeled(d);
    let w = MixWeights::new(vec![0.5, 0.5]).unwrap();
    let v = shared_consistency_with(&probs, &a, &w, Distance::CrossEntropy).unwrap();
    let dist = -(0.9f64).ln() - (0.6f64).ln();
    assert_relative_eq!(dist, 0.616_186_139_423_817, epsilon = 1e-12);
    assert_relative_eq!(v, dist / 2.0, epsilon = 1e-15);
    let mut rng = rng_from_seed(0);
    assert_relative_eq!(
        shared_consistency(&probs, &a, &mut rng, 0.5).unwrap(),
        v,
        epsilon = 1e-15
    );
}

#[test]
fn consistency_skips_labeled_pixels() {
    let d = Dims::new(1, 2);
    let a = ann(d, &[Label::Foreground, Label::Unlabeled]);
    let w = MixWeights::new(vec![0.5, 0.5]).unwrap();
    let base = [pm(d, &[[0.3, 0.7], [0.8, 0.2]]), pm(d, &[[0.6, 0.4], [0.7, 0.3]])];
    let moved = [pm(d, &[[0.99, 0.01], [0.8, 0.2]]), pm(d, &[[0.01, 0.99], [0.7, 0.3]])];
    assert_eq!(
        shared_consistency_with(&base, &a, &w, Distance::CrossEntropy).unwrap(),
        shared_consistency_with(&moved, &a, &w, Distance::CrossEntropy).unwrap()
    );
}

#[test]
fn combined_loss_limits() {
    let d = Dims::new(2, 2);
    let mut rng = rng_from_seed(5);
    let a = random_ann(d, &mut rng);
    let probs: Vec<ProbMap> = (0..3)
        .map(|_| ProbMap::from_logits(&random_logits(d, &mut rng, 1.0)))
        .collect();
    let w = sample_mix_weights(3, 0.5, &mut rng).unwrap();
    let zero = combined_loss_with(&probs, &a, 0.0, &w).unwrap();
    assert_eq!(zero.l_total, zero.l_sup);

    let single = combined_loss(&probs[..1], &a, 0.5, &mut rng, 0.5).unwrap();
    assert_eq!(single.l_total, partial_cross_entropy(&probs[0], &a).unwrap());
    assert_eq!(single.l_cons, 0.0);
}

#[test]
fn combined_loss_composes_components() {
    let d = Dims::new(3, 3);
    let mut rng = rng_from_seed(6);
    let a = random_ann(d, &mut rng);
    let probs: Vec<ProbMap> = (0..3)
        .map(|_| ProbMap::from_logits(&random_logits(d, &mut rng, 1.5)))
        .collect();
    let w = sample_mix_weights(3, 0.5, &mut rng).unwrap();
    let got = combined_loss_with(&probs, &a, 0.7, &w).unwrap();
    let l_sup = probs.iter().map(|p| partial_cross_entropy(p, &a).unwrap()).sum::<f64>() / 3.0;
    let l_cons = shared_consistency_with(&probs, &a, &w, Distance::CrossEntropy).unwrap();
    assert_relative_eq!(got.l_sup, l_sup, epsilon = 1e-15);
    assert_relative_eq!(got.l_cons, l_cons, epsilon = 1e-15);
    assert_eq!(got.l_total, got.l_sup + 0.7 * got.l_cons);
}

#[test]
fn baseline_examples() {
    let d = Dims::new(1, 2);
    let a = AnnotationMap::unlabeled(d);
    let one_hot = pm(d, &[[1.0, 0.0], [0.0, 1.0]]);
    assert_eq!(entropy_min_loss(&one_hot, &a).unwrap(), 0.0);
    let half = pm(d, &[[0.5, 0.5], [0.5, 0.5]]);
    assert_relative_eq!(
        entropy_min_loss(&half, &a).unwrap(),
        std::f64::consts::LN_2,
        epsilon = 1e-15
    );
    let d = Dims::new(3, 3);
    let constant = pm(d, &[[0.3, 0.7]; 9]);
    assert_eq!(
        total_variation_loss(&constant, &AnnotationMap::unlabeled(d)).unwrap(),
        0.0
    );
}

#[test]
fn mumford_shah_vanishes_on_perfect_two_phase_fit() {
    let d = Dims::new(1, 4);
    let image = Image::new(d, vec![0.1, 0.1, 0.9, 0.9]).unwrap();
    let p = pm(d, &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
    let a = AnnotationMap::unlabeled(d);
    // Data term is zero; only the weighted TV of the single step remains.
    let tv = total_variation_loss(&p, &a).unwrap();
    assert_relative_eq!(
        mumford_shah_loss(&image, &p, &a).unwrap(),
        MUMFORD_SHAH_TV_WEIGHT * tv,
        epsilon = 1e-15
    );
}

fn finite_difference_check(objective: Objective, k: usize, seed: u64) {
    let d = Dims::new(5, 6);
    let mut rng = rng_from_seed(seed);
    let a = random_ann(d, &mut rng);
    let logits: Vec<LogitMap> = (0..k).map(|_| random_logits(d, &mut rng, 2.0)).collect();
    let image = Image::new(d, (0..d.len()).map(|_| rng.random::<f32>()).collect()).unwrap();
    let w = sample_step_weights(k, 0.5, &mut rng).unwrap();
    let (_, grads) = objective.evaluate(&logits, &a, &image, &w).unwrap();
    let h = 1e-5;
    for dec in 0..k {
        for i in 0..logits[dec].data.len() {
            let mut plus = logits.clone();
            plus[dec].data[i] += h;
            let mut minus = logits.clone();
            minus[dec].data[i] -= h;
            let fp = objective.evaluate(&plus, &a, &image, &w).unwrap().0.l_total;
            let fm = objective.evaluate(&minus, &a, &image, &w).unwrap().0.l_total;
            let fd = (fp - fm) / (2.0 * h);
            let an = grads[dec].data[i];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                "{:?} decoder {dec} logit {i}: fd {fd} vs analytic {an}",
                objective.regularizer
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences_for_every_regularizer() {
    let regs = [
        Regularizer::SharedConsistency {
            distance: Distance::CrossEntropy,
        },
        Regularizer::SharedConsistency {
            distance: Distance::Mse,
        },
        Regularizer::EntropyMin,
        Regularizer::TotalVariation,
        Regularizer::MumfordShah,
        Regularizer::None,
    ];
    for (s, reg) in regs.into_iter().enumerate() {
        for k in [1, 2, 3] {
            finite_difference_check(
                Objective {
                    gamma: 0.5,
                    regularizer: reg,
                },
                k,
                100 + s as u64,
            );
        }
    }
}

/// Temperature scaling can move the argmax of a mixture when decoders disagree.
#[test]
fn temperature_can_flip_a_disagreeing_mixture() {
    let d = Dims::new(1, 1);
    let w = MixWeights::new(vec![0.3, 0.7]).unwrap();
    let logits = |t: f64| {
        let a = LogitMap::new(d, 2, vec![t * 0.9f64.ln(), t * 0.1f64.ln()]).unwrap();
        let b = LogitMap::new(d, 2, vec![t * 0.3f64.ln(), t * 0.7f64.ln()]).unwrap();
        [ProbMap::from_logits(&a), ProbMap::from_logits(&b)]
    };
    assert_eq!(mix_and_harden(&logits(1.0), &w).unwrap().labels.data, vec![1]);
    assert_eq!(mix_and_harden(&logits(0.1), &w).unwrap().labels.data, vec![0]);
}

//! Shared-encoder, multi-decoder U-Net.
//!
//! One encoder with skip connections feeds `K` decoders. Decoder 0 is the
//! main decoder used for segmentation; decoders `1..K` are auxiliary
//! replicas with a different dilation rate, one extra convolution per stage
//! and feature dropout in training mode. Every decoder reads the same skip
//! connections.

pub mod checkpoint;
pub mod layers;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};
use crate::types::{argmax_low, Dims, FullMask, Image, LogitMap, ProbMap};
use layers::{
    concat, dropout, max_pool2, max_pool2_backward, relu_backward, relu_inplace, split_channels, Conv2d, ConvCache,
    DropoutKind, Feature, UpCache, UpConv,
};
pub use params::{Gradients, ParamBlock, ParamKind, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub n_decoders: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub dilation_rates: Vec<usize>,
    pub aux_dropout_rate: f64,
    pub dropout_kind: DropoutKind,
    pub n_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::with_decoders(3)
    }
}

impl ArchConfig {
    /// Default architecture with `k` decoders and dilation rates `1, 2, 4, ...`.
    pub fn with_decoders(k: usize) -> Self {
        Self {
            n_decoders: k,
            depth: 4,
            base_channels: 16,
            dilation_rates: default_dilations(k),
            aux_dropout_rate: 0.5,
            dropout_kind: DropoutKind::Channel,
            n_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_decoders < 1 {
            return Err(Error::config("arch.n_decoders", "must be at least 1"));
        }
        if self.dilation_rates.len() != self.n_decoders {
            return Err(Error::config(
                "arch.dilation_rates",
                format!(
                    "length {} does not match n_decoders {}",
                    self.dilation_rates.len(),
                    self.n_decoders
                ),
            ));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::config("arch.dilation_rates", "rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.aux_dropout_rate) {
            return Err(Error::config("arch.aux_dropout_rate", "must lie in [0, 1)"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("arch.base_channels", "must be positive"));
        }
        if self.n_classes != 2 {
            return Err(Error::config("arch.n_classes", "only 2 classes are supported"));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

pub fn default_dilations(k: usize) -> Vec<usize> {
    (0..k).map(|d| 1 << d.min(16)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct DoubleConv {
    first: Conv2d,
    second: Conv2d,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: UpConv,
    first: Conv2d,
    second: Conv2d,
    extra: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct Decoder {
    /// Deepest stage first.
    stages: Vec<DecoderStage>,
    head: Conv2d,
    auxiliary: bool,
}

/// Encoder plus `K` decoders and their parameters.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ArchConfig,
    params: ParamStore,
    encoder_stages: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    decoders: Vec<Decoder>,
    training: bool,
}

struct ConvStep {
    cache: ConvCache,
    out: Feature,
}

struct EncoderStageTape {
    first: ConvStep,
    second: ConvStep,
    pool_arg: Vec<u32>,
}

struct DecoderStageTape {
    up: UpCache,
    first: ConvStep,
    second: ConvStep,
    extra: Option<ConvStep>,
    drop_scale: Option<Vec<f32>>,
}

struct DecoderTape {
    stages: Vec<DecoderStageTape>,
    head: ConvCache,
}

/// Intermediate activations of one forward pass over a single image.
pub struct Tape {
    encoder: Vec<EncoderStageTape>,
    bottleneck: (ConvStep, ConvStep),
    decoders: Vec<DecoderTape>,
    logits: Vec<LogitMap>,
}

impl Tape {
    /// Per-decoder logits, main decoder first.
    pub fn logits(&self) -> &[LogitMap] {
        &self.logits
    }
}

fn conv_relu(conv: &Conv2d, params: &ParamStore, x: &Feature) -> ConvStep {
    let (mut out, cache) = conv.forward(params, x);
    relu_inplace(&mut out);
    ConvStep { cache, out }
}

fn conv_relu_backward(
    conv: &Conv2d,
    params: &ParamStore,
    step: &ConvStep,
    mut dy: Feature,
    grads: &mut Gradients,
    need_input_grad: bool,
) -> Option<Feature> {
    relu_backward(&step.out, &mut dy);
    conv.backward(params, &step.cache, &dy, grads, need_input_grad)
}

fn to_logit_map(f: &Feature) -> LogitMap {
    let hw = f.plane();
    let c = f.channels;
    let mut data = vec![0.0f64; hw * c];
    for ch in 0..c {
        for (p, &v) in f.data[ch * hw..(ch + 1) * hw].iter().enumerate() {
            data[p * c + ch] = v as f64;
        }
    }
    LogitMap {
        dims: Dims::new(f.height, f.width),
        classes: c,
        data,
    }
}

fn from_logit_map(m: &LogitMap) -> Feature {
    let hw = m.dims.len();
    let c = m.classes;
    let mut f = Feature::zeros(c, m.dims.height, m.dims.width);
    for p in 0..hw {
        for ch in 0..c {
            f.data[ch * hw + p] = m.data[p * c + ch] as f32;
        }
    }
    f
}

impl ModelState {
    /// Builds the graph and draws Glorot-normal weights from `seed`.
    pub fn init(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut encoder_stages = Vec::with_capacity(config.depth);
        let mut in_c = 1;
        for level in 0..config.depth {
            let c = config.channels(level);
            encoder_stages.push(DoubleConv {
                first: Conv2d::new(&mut params, &format!("enc.s{level}.conv1"), in_c, c, 3, 1),
                second: Conv2d::new(&mut params, &format!("enc.s{level}.conv2"), c, c, 3, 1),
            });
            in_c = c;
        }
        let bottom_c = config.channels(config.depth);
        let bottleneck = DoubleConv {
            first: Conv2d::new(&mut params, "enc.bottleneck.conv1", in_c, bottom_c, 3, 1),
            second: Conv2d::new(&mut params, "enc.bottleneck.conv2", bottom_c, bottom_c, 3, 1),
        };
        let mut decoders = Vec::with_capacity(config.n_decoders);
        for (d, &rate) in config.dilation_rates.iter().enumerate() {
            let auxiliary = d > 0;
            let mut stages = Vec::with_capacity(config.depth);
            for level in (0..config.depth).rev() {
                let c = config.channels(level);
                let prefix = format!("dec{d}.s{level}");
                stages.push(DecoderStage {
                    up: UpConv::new(&mut params, &format!("{prefix}.up"), config.channels(level + 1), c),
                    first: Conv2d::new(&mut params, &format!("{prefix}.conv1"), 2 * c, c, 3, rate),
                    second: Conv2d::new(&mut params, &format!("{prefix}.conv2"), c, c, 3, rate),
                    extra: auxiliary.then(|| Conv2d::new(&mut params, &format!("{prefix}.extra"), c, c, 3, rate)),
                });
            }
            let head = Conv2d::new(
                &mut params,
                &format!("dec{d}.head"),
                config.channels(0),
                config.n_classes,
                1,
                1,
            );
            decoders.push(Decoder {
                stages,
                head,
                auxiliary,
            });
        }
        let mut rng = rng_from_seed(seed);
        params.init_glorot(&mut rng);
        Ok(Self {
            config,
            params,
            encoder_stages,
            bottleneck,
            decoders,
            training: false,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn n_decoders(&self) -> usize {
        self.decoders.len()
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let m = self.config.size_multiple();
        if dims.height == 0 || dims.width == 0 || !dims.height.is_multiple_of(m) || !dims.width.is_multiple_of(m) {
            return Err(Error::shape(format!("HxW with both sides divisible by {m}"), dims));
        }
        Ok(())
    }

    /// Forward pass recording everything needed by [`ModelState::backward`].
    ///
    /// `decoders` limits the pass to the first `n` decoders.
    pub fn forward_tape(&self, image: &Image, mode: Mode, decoders: usize, rng: &mut Rng) -> Result<Tape> {
        self.check_input(image.dims)?;
        let params = &self.params;
        let mut x = Feature {
            channels: 1,
            height: image.dims.height,
            width: image.dims.width,
            data: image.data.clone(),
        };
        let mut encoder = Vec::with_capacity(self.encoder_stages.len());
        for stage in &self.encoder_stages {
            let first = conv_relu(&stage.first, params, &x);
            let second = conv_relu(&stage.second, params, &first.out);
            let (pooled, pool_arg) = max_pool2(&second.out);
            x = pooled;
            encoder.push(EncoderStageTape {
                first,
                second,
                pool_arg,
            });
        }
        let b1 = conv_relu(&self.bottleneck.first, params, &x);
        let b2 = conv_relu(&self.bottleneck.second, params, &b1.out);

        let mut decoder_tapes = Vec::new();
        let mut logits = Vec::new();
        for decoder in self.decoders.iter().take(decoders.max(1)) {
            let mut x = b2.out.clone();
            let mut stages = Vec::with_capacity(decoder.stages.len());
            for (s, stage) in decoder.stages.iter().enumerate() {
                let level = self.config.depth - 1 - s;
                let (up, up_cache) = stage.up.forward(params, &x);
                let cat = concat(&up, &encoder[level].second.out);
                let first = conv_relu(&stage.first, params, &cat);
                let second = conv_relu(&stage.second, params, &first.out);
                let extra = stage.extra.as_ref().map(|c| conv_relu(c, params, &second.out));
                let mut out = extra.as_ref().unwrap_or(&second).out.clone();
                let drop_scale = (mode == Mode::Train && decoder.auxiliary && self.config.aux_dropout_rate > 0.0)
                    .then(|| dropout(&mut out, self.config.aux_dropout_rate, self.config.dropout_kind, rng));
                x = out;
                stages.push(DecoderStageTape {
                    up: up_cache,
                    first,
                    second,
                    extra,
                    drop_scale,
                });
            }
            let (head_out, head) = decoder.head.forward(params, &x);
            logits.push(to_logit_map(&head_out));
            decoder_tapes.push(DecoderTape { stages, head });
        }
        Ok(Tape {
            encoder,
            bottleneck: (b1, b2),
            decoders: decoder_tapes,
            logits,
        })
    }

    /// Accumulates parameter gradients given d(loss)/d(logits) for each decoder in the tape.
    pub fn backward(&self, tape: &Tape, dlogits: &[LogitMap], grads: &mut Gradients) {
        assert_eq!(dlogits.len(), tape.decoders.len(), "one logit gradient per decoder");
        let params = &self.params;
        let depth = self.config.depth;
        let mut d_skips: Vec<Option<Feature>> = (0..depth).map(|_| None).collect();
        let mut d_bottom: Option<Feature> = None;

        for ((decoder, dtape), dl) in self.decoders.iter().zip(&tape.decoders).zip(dlogits) {
            let dhead = from_logit_map(dl);
            let mut dx = decoder
                .head
                .backward(params, &dtape.head, &dhead, grads, true)
                .expect("input gradient requested");
            for (s, (stage, st)) in decoder.stages.iter().zip(&dtape.stages).enumerate().rev() {
                let level = depth - 1 - s;
                if let Some(scale) = &st.drop_scale {
                    layers::apply_scale(&mut dx, scale);
                }
                if let (Some(conv), Some(step)) = (&stage.extra, &st.extra) {
                    dx = conv_relu_backward(conv, params, step, dx, grads, true).expect("input gradient");
                }
                dx = conv_relu_backward(&stage.second, params, &st.second, dx, grads, true).expect("input gradient");
                let dcat =
                    conv_relu_backward(&stage.first, params, &st.first, dx, grads, true).expect("input gradient");
                let (dup, dskip) = split_channels(&dcat, stage.up.out_channels);
                match &mut d_skips[level] {
                    Some(acc) => acc.add_assign(&dskip),
                    slot => *slot = Some(dskip),
                }
                dx = stage.up.backward(params, &st.up, &dup, grads);
            }
            match &mut d_bottom {
                Some(acc) => acc.add_assign(&dx),
                slot => *slot = Some(dx),
            }
        }

        let Some(d_bottom) = d_bottom else { return };
        let (b1, b2) = &tape.bottleneck;
        let dx = conv_relu_backward(&self.bottleneck.second, params, b2, d_bottom, grads, true).expect("input");
        let mut dx = conv_relu_backward(&self.bottleneck.first, params, b1, dx, grads, true).expect("input");
        for (level, (stage, st)) in self.encoder_stages.iter().zip(&tape.encoder).enumerate().rev() {
            let mut dstage = max_pool2_backward(&dx, &st.pool_arg, st.second.out.height, st.second.out.width);
            if let Some(ds) = &d_skips[level] {
                dstage.add_assign(ds);
            }
            let d1 = conv_relu_backward(&stage.second, params, &st.second, dstage, grads, true).expect("input");
            match conv_relu_backward(&stage.first, params, &st.first, d1, grads, level > 0) {
                Some(d) => dx = d,
                None => break,
            }
        }
    }

    /// Logits of every decoder for one image.
    pub fn forward_logits(&self, image: &Image, mode: Mode, rng: &mut Rng) -> Result<Vec<LogitMap>> {
        Ok(self.forward_tape(image, mode, self.decoders.len(), rng)?.logits)
    }

    /// Probability maps indexed `[decoder][image]`.
    pub fn forward(&self, images: &[Image], mode: Mode, rng: &mut Rng) -> Result<Vec<Vec<ProbMap>>> {
        let mut out: Vec<Vec<ProbMap>> = vec![Vec::with_capacity(images.len()); self.decoders.len()];
        if let Some(first) = images.first() {
            for img in images {
                first.dims.ensure_eq(img.dims)?;
            }
        }
        for image in images {
            for (d, logits) in self.forward_logits(image, mode, rng)?.iter().enumerate() {
                out[d].push(ProbMap::from_logits(logits));
            }
        }
        Ok(out)
    }

    /// Main-decoder probabilities in eval mode.
    pub fn forward_main(&self, image: &Image) -> Result<ProbMap> {
        // Eval mode draws nothing from the rng.
        let mut rng = rng_from_seed(0);
        let tape = self.forward_tape(image, Mode::Eval, 1, &mut rng)?;
        Ok(ProbMap::from_logits(&tape.logits[0]))
    }

    pub fn segment(&self, image: &Image) -> Result<FullMask> {
        Ok(harden(&self.forward_main(image)?))
    }
}

/// Per-pixel argmax of a probability map, ties to background.
pub fn harden(prob: &ProbMap) -> FullMask {
    FullMask {
        dims: prob.dims,
        data: prob.pixels().map(|p| argmax_low(p) as u8).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn small_config(k: usize) -> ArchConfig {
        ArchConfig {
            depth: 2,
            base_channels: 4,
            ..ArchConfig::with_decoders(k)
        }
    }

    fn random_image(dims: Dims, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::new(dims, (0..dims.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn single_decoder_has_no_auxiliary_blocks() {
        let model = ModelState::init(small_config(1), 0).unwrap();
        assert_eq!(model.n_decoders(), 1);
        assert!(model
            .params()
            .blocks
            .iter()
            .all(|b| !b.name.contains("extra") && !b.name.starts_with("dec1")));
    }

    #[test]
    fn auxiliary_decoders_mirror_main_plus_extra_convs() {
        let model = ModelState::init(small_config(3), 0).unwrap();
        let shapes = |d: usize| -> Vec<(String, Vec<usize>)> {
            let prefix = format!("dec{d}.");
            model
                .params()
                .blocks
                .iter()
                .filter(|b| b.name.starts_with(&prefix))
                .map(|b| (b.name[prefix.len()..].to_string(), b.shape.clone()))
                .collect()
        };
        let main = shapes(0);
        for d in 1..3 {
            let aux: Vec<_> = shapes(d).into_iter().filter(|(n, _)| !n.contains("extra")).collect();
            assert_eq!(aux, main);
            assert_eq!(shapes(d).iter().filter(|(n, _)| n.contains("extra")).count(), 2 * 2);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ModelState::init(small_config(3), 11).unwrap();
        let b = ModelState::init(small_config(3), 11).unwrap();
        let c = ModelState::init(small_config(3), 12).unwrap();
        let flat = |m: &ModelState| {
            m.params()
                .blocks
                .iter()
                .flat_map(|b| b.data.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = small_config(3);
        cfg.dilation_rates = vec![1, 2];
        assert!(matches!(ModelState::init(cfg, 0), Err(Error::Config { .. })));
        let mut cfg = small_config(2);
        cfg.aux_dropout_rate = 1.0;
        assert!(ModelState::init(cfg, 0).is_err());
        assert!(ModelState::init(small_config(0), 0).is_err());
    }

    #[test]
    fn shape_error_reports_dims() {
        let model = ModelState::init(small_config(2), 0).unwrap();
        let err = model.segment(&Image::zeros(Dims::new(10, 8))).unwrap_err();
        assert!(err.to_string().contains("10x8"), "{err}");
    }

    #[test]
    fn outputs_are_normalized_and_full_size() {
        let model = ModelState::init(small_config(3), 4).unwrap();
        let dims = Dims::new(8, 12);
        let images = [random_image(dims, 1), random_image(dims, 2)];
        let mut rng = rng_from_seed(0);
        let out = model.forward(&images, Mode::Train, &mut rng).unwrap();
        assert_eq!(out.len(), 3);
        for maps in &out {
            assert_eq!(maps.len(), 2);
            for m in maps {
                assert_eq!(m.dims, dims);
                for p in m.pixels() {
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(p.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn dropout_perturbs_auxiliary_decoders_only() {
        let model = ModelState::init(small_config(3), 8).unwrap();
        let image = random_image(Dims::new(8, 8), 3);
        let a = model
            .forward_logits(&image, Mode::Train, &mut rng_from_seed(1))
            .unwrap();
        let b = model
            .forward_logits(&image, Mode::Train, &mut rng_from_seed(2))
            .unwrap();
        assert_eq!(a[0], b[0]);
        assert_ne!(a[1], b[1]);
        assert_ne!(a[2], b[2]);
        let e1 = model.forward_logits(&image, Mode::Eval, &mut rng_from_seed(1)).unwrap();
        let e2 = model.forward_logits(&image, Mode::Eval, &mut rng_from_seed(2)).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1[0], a[0]);
    }

    #[test]
    fn harden_breaks_ties_toward_background() {
        let dims = Dims::new(2, 2);
        let tie = ProbMap::new(dims, 2, vec![0.5; 8]).unwrap();
        assert_eq!(harden(&tie).data, vec![0; 4]);
        let fg = ProbMap::new(dims, 2, [0.0, 1.0].repeat(4)).unwrap();
        assert_eq!(harden(&fg).data, vec![1; 4]);
    }

    /// Whole-network gradient against finite differences on a handful of
    /// parameters, using a linear functional of the logits.
    #[test]
    fn backward_matches_finite_differences() {
        let mut cfg = small_config(2);
        cfg.aux_dropout_rate = 0.0;
        let mut model = ModelState::init(cfg, 21).unwrap();
        // Zero biases put many pre-activations exactly on the ReLU kink.
        for block in &mut model.params_mut().blocks {
            if block.kind == ParamKind::Bias {
                block.data.iter_mut().for_each(|v| *v = 0.05);
            }
        }
        let image = random_image(Dims::new(8, 8), 5);
        let mut rng = rng_from_seed(0);
        let tape = model.forward_tape(&image, Mode::Train, 2, &mut rng).unwrap();
        let weights: Vec<LogitMap> = tape
            .logits()
            .iter()
            .enumerate()
            .map(|(d, l)| {
                let mut g = l.zeros_like();
                for (i, v) in g.data.iter_mut().enumerate() {
                    *v = ((i * 7 + d * 3) % 5) as f64 - 2.0;
                }
                g
            })
            .collect();
        let objective = |m: &ModelState| -> f64 {
            let mut rng = rng_from_seed(0);
            let logits = m.forward_logits(&image, Mode::Train, &mut rng).unwrap();
            logits
                .iter()
                .zip(&weights)
                .map(|(l, w)| l.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };
        let mut grads = Gradients::zeros_like(model.params());
        model.backward(&tape, &weights, &mut grads);
        let eps = 1e-4f32;
        let mut checked = 0;
        for id in 0..model.params().blocks.len() {
            let idx = 0;
            let base = model.params().data(id)[idx];
            model.params_mut().data_mut(id)[idx] = base + eps;
            let fp = objective(&model);
            model.params_mut().data_mut(id)[idx] = base - eps;
            let fm = objective(&model);
            model.params_mut().data_mut(id)[idx] = base;
            let fd = (fp - fm) / (2.0 * eps as f64);
            let an = grads.data(id)[idx] as f64;
            let scale = fd.abs().max(an.abs()).max(1.0);
            // A perturbation can still straddle a ReLU kink; require nearly all blocks to match.
            if (fd - an).abs() / scale < 2e-2 {
                checked += 1;
            }
        }
        let total = model.params().blocks.len();
        assert!(checked * 10 >= total * 9, "{checked}/{total} parameter blocks matched");
    }
}

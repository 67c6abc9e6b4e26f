//! Paired dual-headed cGAN networks.
//!
//! The generator is a U-Net over the 6-channel stack `content ++ style`.
//! Two discriminator heads judge its output: a Markovian patch
//! discriminator conditioned on the content image, and a wavelet-CNN
//! embedding network that compares the candidate against the style image.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{is_pow2, seeded, width, Act, ConvBnAct, Embedder, Model, StyleTransfer};
use crate::error::{Error, Result};
use crate::image::{stack_nchw, ImageTensor};
use crate::nn::{self, global_avg_pool, Conv2d, InstanceNorm2d, Linear, Mode, ParamBuilder, ParamSet};
use crate::wavelet::{check_divisible, haar_dwt2_tensor, SubbandPyramid};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorA1Config {
    pub image_size: (usize, usize),
    pub base_channels: usize,
    pub max_channels: usize,
    /// Encoder levels; each halves the spatial size and feeds one skip.
    pub depth: usize,
    pub bottleneck_dim: usize,
    /// Train-time dropout in the innermost decoder blocks (the noise source).
    pub dropout_rate: f32,
    pub dropout_blocks: usize,
}

impl Default for GeneratorA1Config {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            base_channels: 32,
            max_channels: 128,
            depth: 4,
            bottleneck_dim: 64,
            dropout_rate: 0.5,
            dropout_blocks: 3,
        }
    }
}

impl GeneratorA1Config {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let (h, w) = self.image_size;
        if !is_pow2(h) || !is_pow2(w) {
            errs.push(format!("generator.image_size ({h}, {w}) must be powers of two"));
        }
        if self.depth == 0 {
            errs.push("generator.depth must be >= 1".into());
        } else if check_divisible(h, w, self.depth).is_err() {
            errs.push(format!(
                "generator.image_size ({h}, {w}) not divisible by 2^depth = {}",
                1usize << self.depth.min(30)
            ));
        }
        if self.bottleneck_dim == 0 {
            errs.push("generator.bottleneck_dim must be >= 1".into());
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            errs.push("generator.base_channels must be >= 1 and <= max_channels".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            errs.push(format!(
                "generator.dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn channels(&self, level: usize) -> usize {
        width(self.base_channels, level, self.max_channels)
    }
}

struct DecoderBlock {
    block: ConvBnAct,
    dropout: bool,
}

/// Six-channel U-Net generator.
pub struct GeneratorA1 {
    cfg: GeneratorA1Config,
    params: ParamSet,
    encoder: Vec<ConvBnAct>,
    bottleneck: ConvBnAct,
    decoder: Vec<DecoderBlock>,
    output: Conv2d,
}

impl GeneratorA1 {
    pub fn new(cfg: &GeneratorA1Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::default();
        let mut rng = seeded(seed, 1);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let d = cfg.depth;
        let mut encoder = Vec::with_capacity(d);
        let mut c_in = 6;
        for l in 0..d {
            let c = cfg.channels(l);
            encoder.push(ConvBnAct::new(
                &mut pb.sub(format!("enc{l}")),
                c_in,
                c,
                4,
                2,
                1,
                true,
                Act::Relu,
            )?);
            c_in = c;
        }
        let bottleneck = ConvBnAct::new(
            &mut pb.sub("bottleneck"),
            c_in,
            cfg.bottleneck_dim,
            3,
            1,
            1,
            true,
            Act::Relu,
        )?;
        // Decoder block `l` consumes `prev ++ skip_l` at the resolution of
        // encoder level `l`, upsamples, and convolves.
        let mut decoder = Vec::with_capacity(d.saturating_sub(1));
        let mut prev = cfg.bottleneck_dim;
        for l in (1..d).rev() {
            let c_out = cfg.channels(l - 1);
            decoder.push(DecoderBlock {
                block: ConvBnAct::new(
                    &mut pb.sub(format!("dec{l}")),
                    prev + cfg.channels(l),
                    c_out,
                    3,
                    1,
                    1,
                    true,
                    Act::Relu,
                )?,
                dropout: d - l <= cfg.dropout_blocks,
            });
            prev = c_out;
        }
        let output = Conv2d::new(&mut pb.sub("dec0.conv"), prev + cfg.channels(0), 3, 3, 1, 1, true)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            bottleneck,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorA1Config {
        &self.cfg
    }

    /// One skip connection per encoder level.
    pub fn skip_count(&self) -> usize {
        self.encoder.len()
    }

    /// `content`, `style`: `N x 3 x H x W` in `[-1, 1]`. Dropout is active
    /// only in training modes and then requires `rng`.
    pub fn forward(
        &self,
        content: &Tensor,
        style: &Tensor,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        if content.dims() != style.dims() {
            return Err(Error::shape(format!(
                "content {:?} and style {:?} differ in shape",
                content.dims(),
                style.dims()
            )));
        }
        let (_, c, h, w) = content.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel inputs, got {c}")));
        }
        check_divisible(h, w, self.cfg.depth)?;
        let mut x = Tensor::cat(&[content, style], 1)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for enc in &self.encoder {
            x = enc.forward(&x, mode)?;
            skips.push(x.clone());
        }
        x = self.bottleneck.forward(&x, mode)?;
        let mut level = self.encoder.len();
        for dec in &self.decoder {
            level -= 1;
            let cat = Tensor::cat(&[&x, &skips[level]], 1)?;
            let up = nn::upsample2x(&cat)?;
            let y = dec.block.conv.forward(&up)?;
            let y = match &dec.block.bn {
                Some(bn) => bn.forward(&y, mode)?,
                None => y,
            };
            let y = if dec.dropout {
                nn::dropout(&y, self.cfg.dropout_rate, mode, rng.as_deref_mut())?
            } else {
                y
            };
            x = dec.block.act.apply(&y)?;
        }
        let cat = Tensor::cat(&[&x, &skips[0]], 1)?;
        let y = self.output.forward(&nn::upsample2x(&cat)?)?;
        nn::bounded_tanh(&y)
    }
}

impl Model for GeneratorA1 {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl StyleTransfer for GeneratorA1 {
    fn transfer_batch(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.forward(content, style, Mode::Eval, None)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchDiscriminatorConfig {
    pub base_channels: usize,
    pub max_channels: usize,
    /// Stride-2 levels before the two stride-1 convolutions.
    pub n_strided: usize,
}

impl Default for PatchDiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            max_channels: 128,
            n_strided: 3,
        }
    }
}

impl PatchDiscriminatorConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_strided == 0 {
            errs.push("patch_discriminator.n_strided must be >= 1".into());
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            errs.push("patch_discriminator.base_channels must be >= 1 and <= max_channels".into());
        }
        errs
    }
}

/// Grid of per-patch "real" probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMap {
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f32>,
    /// Side of the square input window seen by each cell.
    pub receptive_field: usize,
}

impl PatchMap {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.probs[r * self.cols + c]
    }
}

/// Markovian content discriminator over `condition ++ candidate`.
pub struct PatchDiscriminator {
    params: ParamSet,
    layers: Vec<ConvBnAct>,
    head: Conv2d,
    calls: AtomicU64,
}

impl PatchDiscriminator {
    pub fn new(cfg: &PatchDiscriminatorConfig, seed: u64) -> Result<Self> {
        let errs = cfg.validation_errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut params = ParamSet::default();
        let mut rng = seeded(seed, 2);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let mut layers = Vec::new();
        let mut c_in = 6;
        for l in 0..cfg.n_strided {
            let c = width(cfg.base_channels, l, cfg.max_channels);
            layers.push(ConvBnAct::new(
                &mut pb.sub(format!("layer{l}")),
                c_in,
                c,
                4,
                2,
                1,
                l > 0,
                Act::Leaky(LEAK),
            )?);
            c_in = c;
        }
        let c = width(cfg.base_channels, cfg.n_strided, cfg.max_channels);
        layers.push(ConvBnAct::new(
            &mut pb.sub(format!("layer{}", cfg.n_strided)),
            c_in,
            c,
            4,
            1,
            1,
            true,
            Act::Leaky(LEAK),
        )?);
        let head = Conv2d::new(&mut pb.sub("head"), c, 1, 4, 1, 1, true)?;
        Ok(Self {
            params,
            layers,
            head,
            calls: AtomicU64::new(0),
        })
    }

    fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().map(|l| &l.conv).chain(std::iter::once(&self.head))
    }

    /// Number of forward passes so far (training audit).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Receptive field of one output cell, from the conv arithmetic.
    pub fn receptive_field(&self) -> usize {
        let convs: Vec<_> = self.convs().collect();
        convs
            .iter()
            .rev()
            .fold(1, |r, c| r * c.stride + (c.kernel() - c.stride))
    }

    /// Output grid side for an input side `n`.
    pub fn output_size(&self, n: usize) -> usize {
        self.convs().fold(n, |s, c| c.out_size(s))
    }

    /// Product of the strides: input pixels per output cell step.
    pub fn total_stride(&self) -> usize {
        self.convs().map(|c| c.stride).product()
    }

    /// `N x 1 x H' x W'` probabilities.
    pub fn forward(&self, condition: &Tensor, candidate: &Tensor, mode: Mode) -> Result<Tensor> {
        if condition.dims() != candidate.dims() {
            return Err(Error::shape(format!(
                "condition {:?} and candidate {:?} differ in shape",
                condition.dims(),
                candidate.dims()
            )));
        }
        let (_, _, h, w) = condition.dims4()?;
        if self.output_size(h) == 0 || self.output_size(w) == 0 || h < 16 || w < 16 {
            return Err(Error::shape(format!("input {h}x{w} too small for the patch discriminator")));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut x = Tensor::cat(&[condition, candidate], 1)?;
        for l in &self.layers {
            x = l.forward(&x, mode)?;
        }
        nn::sigmoid(&self.head.forward(&x)?)
    }

    pub fn patch_map(&self, condition: &ImageTensor, candidate: &ImageTensor) -> Result<PatchMap> {
        condition.ensure_same_shape(candidate, "condition and candidate")?;
        let c = stack_nchw(std::slice::from_ref(condition), DType::F32)?;
        let d = stack_nchw(std::slice::from_ref(candidate), DType::F32)?;
        let out = self.forward(&c, &d, Mode::Eval)?;
        let (_, _, rows, cols) = out.dims4()?;
        Ok(PatchMap {
            rows,
            cols,
            probs: out.flatten_all()?.to_vec1()?,
            receptive_field: self.receptive_field(),
        })
    }
}

impl Model for PatchDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaveletDiscriminatorConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    /// Length of the joint (style ++ candidate) embedding; each image's
    /// trunk embedding is half of it.
    pub embedding_dim: usize,
}

impl Default for WaveletDiscriminatorConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 16,
            max_channels: 64,
            embedding_dim: 64,
        }
    }
}

impl WaveletDiscriminatorConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.levels == 0 {
            errs.push("style_discriminator.levels must be >= 1".into());
        }
        if self.embedding_dim < 2 || self.embedding_dim % 2 != 0 {
            errs.push("style_discriminator.embedding_dim must be even and >= 2".into());
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            errs.push("style_discriminator.base_channels must be >= 1 and <= max_channels".into());
        }
        errs
    }

    pub fn trunk_dim(&self) -> usize {
        self.embedding_dim / 2
    }
}

/// Wavelet-CNN style head. Each image goes through the shared trunk: a
/// Haar front end whose per-level subbands are projected (1x1 conv) and
/// added channel-wise into a strided, instance-normalised conv path.
pub struct WaveletStyleDiscriminator {
    cfg: WaveletDiscriminatorConfig,
    params: ParamSet,
    stem: Conv2d,
    stem_norm: InstanceNorm2d,
    /// Stride-2 convs entering levels 2..=L.
    downs: Vec<Conv2d>,
    /// 1x1 projections of the level 2..=L subbands.
    projections: Vec<Conv2d>,
    norms: Vec<InstanceNorm2d>,
    final_down: Conv2d,
    final_norm: InstanceNorm2d,
    head: Linear,
    calls: AtomicU64,
}

impl WaveletStyleDiscriminator {
    pub fn new(cfg: &WaveletDiscriminatorConfig, seed: u64) -> Result<Self> {
        let errs = cfg.validation_errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut params = ParamSet::default();
        let mut rng = seeded(seed, 3);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let ch = |l: usize| width(cfg.base_channels, l, cfg.max_channels);
        let bands = 12;
        let stem = Conv2d::new(&mut pb.sub("stem.conv"), bands, ch(0), 3, 1, 1, true)?;
        let stem_norm = InstanceNorm2d::new(&mut pb.sub("stem.norm"), ch(0))?;
        let mut downs = Vec::new();
        let mut projections = Vec::new();
        let mut norms = Vec::new();
        for l in 1..cfg.levels {
            downs.push(Conv2d::new(&mut pb.sub(format!("level{}.down", l + 1)), ch(l - 1), ch(l), 4, 2, 1, true)?);
            projections.push(Conv2d::new(&mut pb.sub(format!("level{}.proj", l + 1)), bands, ch(l), 1, 1, 0, false)?);
            norms.push(InstanceNorm2d::new(&mut pb.sub(format!("level{}.norm", l + 1)), ch(l))?);
        }
        let last = ch(cfg.levels - 1);
        let top = ch(cfg.levels);
        let final_down = Conv2d::new(&mut pb.sub("final.down"), last, top, 4, 2, 1, true)?;
        let final_norm = InstanceNorm2d::new(&mut pb.sub("final.norm"), top)?;
        let head = Linear::new(&mut pb.sub("head"), top, cfg.trunk_dim())?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            stem,
            stem_norm,
            downs,
            projections,
            norms,
            final_down,
            final_norm,
            head,
            calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &WaveletDiscriminatorConfig {
        &self.cfg
    }

    /// Number of joint forward passes so far (training audit).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel inputs, got {c}")));
        }
        if !is_pow2(h) || !is_pow2(w) {
            return Err(Error::shape(format!(
                "style discriminator needs power-of-two sides, got {h}x{w}"
            )));
        }
        check_divisible(h, w, self.cfg.levels + 1)
    }

    /// Trunk applied to precomputed per-level band stacks
    /// (`N x 12 x H/2^l x W/2^l`, ordered LL, LH, HL, HH).
    pub fn trunk_from_bands(&self, bands: &[Tensor]) -> Result<Tensor> {
        if bands.len() != self.cfg.levels {
            return Err(Error::shape(format!(
                "expected {} band levels, got {}",
                self.cfg.levels,
                bands.len()
            )));
        }
        let lrelu = |t: &Tensor| nn::leaky_relu(t, LEAK);
        let mut x = lrelu(&self.stem_norm.forward(&self.stem.forward(&bands[0])?)?)?;
        for (i, band) in bands.iter().enumerate().skip(1) {
            let down = self.downs[i - 1].forward(&x)?;
            let fused = (down + self.projections[i - 1].forward(band)?)?;
            x = lrelu(&self.norms[i - 1].forward(&fused)?)?;
        }
        let x = lrelu(&self.final_norm.forward(&self.final_down.forward(&x)?)?)?;
        self.head.forward(&global_avg_pool(&x)?)
    }

    /// `N x 3 x H x W` images to `N x trunk_dim` embeddings.
    pub fn trunk(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let levels = haar_dwt2_tensor(images, self.cfg.levels)?;
        let bands = levels
            .iter()
            .map(|b| Ok(Tensor::cat(&[&b[0], &b[1], &b[2], &b[3]], 1)?))
            .collect::<Result<Vec<_>>>()?;
        self.trunk_from_bands(&bands)
    }

    /// Trunk embedding of one image computed from an externally supplied
    /// Haar pyramid.
    pub fn trunk_from_pyramid(&self, pyramid: &SubbandPyramid) -> Result<Tensor> {
        let bands = pyramid
            .levels()
            .iter()
            .map(|l| {
                let parts = [&l.ll, &l.lh, &l.hl, &l.hh]
                    .iter()
                    .map(|b| stack_nchw(std::slice::from_ref(*b), DType::F32))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Tensor::cat(&parts, 1)?)
            })
            .collect::<Result<Vec<_>>>()?;
        self.trunk_from_bands(&bands)
    }

    /// Joint embedding `[trunk(style) ++ trunk(candidate)]`, `N x embedding_dim`,
    /// computed in a single trunk pass over both images.
    pub fn forward(&self, style: &Tensor, candidate: &Tensor) -> Result<Tensor> {
        if style.dims() != candidate.dims() {
            return Err(Error::shape(format!(
                "style {:?} and candidate {:?} differ in shape",
                style.dims(),
                candidate.dims()
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let n = style.dim(0)?;
        let emb = self.trunk(&Tensor::cat(&[style, candidate], 0)?)?;
        Ok(Tensor::cat(&[emb.narrow(0, 0, n)?, emb.narrow(0, n, n)?], 1)?)
    }

    /// Splits a joint embedding into its two trunk halves.
    pub fn split(&self, joint: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self.cfg.trunk_dim();
        Ok((joint.narrow(1, 0, t)?, joint.narrow(1, t, t)?))
    }
}

impl Model for WaveletStyleDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl Embedder for WaveletStyleDiscriminator {
    fn embedding_dim(&self) -> usize {
        self.cfg.trunk_dim()
    }
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.trunk(images)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A1Config {
    pub generator: GeneratorA1Config,
    pub patch_discriminator: PatchDiscriminatorConfig,
    pub style_discriminator: WaveletDiscriminatorConfig,
}

impl A1Config {
    pub fn with_image_size(mut self, size: (usize, usize)) -> Self {
        self.generator.image_size = size;
        self
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = self.generator.validation_errors();
        errs.extend(self.patch_discriminator.validation_errors());
        errs.extend(self.style_discriminator.validation_errors());
        let (h, w) = self.generator.image_size;
        if check_divisible(h, w, self.style_discriminator.levels + 1).is_err() {
            errs.push(format!(
                "image_size ({h}, {w}) not divisible by 2^(style levels + 1)"
            ));
        }
        errs
    }
}

/// Generator plus both discriminator heads.
pub struct A1Bundle {
    pub generator: GeneratorA1,
    pub content_head: PatchDiscriminator,
    pub style_head: WaveletStyleDiscriminator,
}

impl A1Bundle {
    pub fn new(cfg: &A1Config, seed: u64) -> Result<Self> {
        let errs = cfg.validation_errors();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Ok(Self {
            generator: GeneratorA1::new(&cfg.generator, seed)?,
            content_head: PatchDiscriminator::new(&cfg.patch_discriminator, seed)?,
            style_head: WaveletStyleDiscriminator::new(&cfg.style_discriminator, seed)?,
        })
    }

    pub fn breakdown(&self) -> Vec<(String, usize)> {
        vec![
            ("generator".into(), self.generator.param_count()),
            ("content_discriminator".into(), self.content_head.param_count()),
            ("style_discriminator".into(), self.style_head.param_count()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.breakdown().iter().map(|(_, n)| n).sum()
    }

    /// Every parameter, prefixed by sub-model.
    pub fn all_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        set.extend_prefixed("generator", self.generator.params());
        set.extend_prefixed("content_head", self.content_head.params());
        set.extend_prefixed("style_head", self.style_head.params());
        set
    }
}

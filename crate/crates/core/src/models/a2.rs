//! Unpaired generator built from two encoders and a decoder.
//!
//! The content encoder yields a fixed 32-dim latent and a list of skip
//! rasters, the dense style encoder yields a style latent, and the decoder
//! starts from the style latent alone, pulling content in only through
//! the skips.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{seeded, width, Act, ConvBnAct, Embedder, Model, StyleTransfer};
use crate::error::{Error, Result};
use crate::image::{stack_nchw, ImageTensor};
use crate::nn::{self, BatchNorm2d, Conv2d, Linear, Mode, ParamBuilder, ParamSet};
use crate::wavelet::check_divisible;

/// Length of the content latent. Not configurable.
pub const CONTENT_LATENT_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContentEncoderConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl Default for ContentEncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            max_channels: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleEncoderConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    /// Channel compression in transition layers.
    pub compression: f64,
    pub latent_dim: usize,
}

impl Default for StyleEncoderConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            growth_rate: 8,
            blocks: 3,
            layers_per_block: 3,
            compression: 0.5,
            latent_dim: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Content-encoder levels whose skips are concatenated (0 = full
    /// resolution). `None` means all levels.
    pub skip_levels: Option<Vec<usize>>,
}

#[allow(clippy::derivable_impls)]
impl Default for DecoderConfig {
    fn default() -> Self {
        Self { skip_levels: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2Config {
    pub image_size: (usize, usize),
    pub content_encoder: ContentEncoderConfig,
    pub style_encoder: StyleEncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for A2Config {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            content_encoder: ContentEncoderConfig::default(),
            style_encoder: StyleEncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl A2Config {
    pub fn with_image_size(mut self, size: (usize, usize)) -> Self {
        self.image_size = size;
        self
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let ce = &self.content_encoder;
        let se = &self.style_encoder;
        let (h, w) = self.image_size;
        if ce.depth == 0 {
            errs.push("content_encoder.depth must be >= 1".into());
        } else if check_divisible(h, w, ce.depth).is_err() {
            errs.push(format!(
                "image_size ({h}, {w}) not divisible by 2^content_encoder.depth"
            ));
        }
        if ce.base_channels == 0 || ce.max_channels < ce.base_channels {
            errs.push("content_encoder.base_channels must be >= 1 and <= max_channels".into());
        }
        if se.stem_channels == 0 || se.growth_rate == 0 || se.blocks == 0 || se.layers_per_block == 0 {
            errs.push("style_encoder widths, blocks and layers must be >= 1".into());
        }
        if !(se.compression > 0.0 && se.compression <= 1.0) {
            errs.push(format!("style_encoder.compression must lie in (0, 1], got {}", se.compression));
        }
        if se.latent_dim == 0 {
            errs.push("style_encoder.latent_dim must be >= 1".into());
        }
        if check_divisible(h, w, se.blocks).is_err() {
            errs.push(format!("image_size ({h}, {w}) not divisible by 2^style_encoder.blocks"));
        }
        if let Some(levels) = &self.decoder.skip_levels {
            for &l in levels {
                if l >= ce.depth {
                    errs.push(format!(
                        "decoder.skip_levels entry {l} exceeds content encoder depth {}",
                        ce.depth
                    ));
                }
            }
        }
        errs
    }
}

fn config_err(errs: Vec<String>) -> Result<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

fn check_rgb(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3-channel inputs, got {c}")));
    }
    Ok((n, h, w))
}

/// Content latent plus skip rasters ordered shallow to deep.
#[derive(Clone, Debug)]
pub struct ContentEncoding {
    pub latent: Tensor,
    pub skips: Vec<Tensor>,
}

/// `[Conv -> BatchNorm -> ReLU]` stack with a linear latent head.
pub struct ContentEncoder {
    cfg: ContentEncoderConfig,
    params: ParamSet,
    levels: Vec<ConvBnAct>,
    head: Linear,
}

impl ContentEncoder {
    pub fn new(cfg: &ContentEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::Config(vec!["content_encoder.depth must be >= 1".into()]));
        }
        let mut params = ParamSet::default();
        let mut rng = seeded(seed, 4);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut c_in = 3;
        for l in 0..cfg.depth {
            let c = width(cfg.base_channels, l, cfg.max_channels);
            let (k, s) = if l == 0 { (3, 1) } else { (4, 2) };
            levels.push(ConvBnAct::new(&mut pb.sub(format!("level{l}")), c_in, c, k, s, 1, true, Act::Relu)?);
            c_in = c;
        }
        let head = Linear::new(&mut pb.sub("latent"), c_in, CONTENT_LATENT_DIM)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            levels,
            head,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Channels of the skip at each level.
    pub fn skip_channels(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.conv.out_channels()).collect()
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<ContentEncoding> {
        let (_, h, w) = check_rgb(images)?;
        check_divisible(h, w, self.cfg.depth)?;
        let mut x = images.clone();
        let mut skips = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            x = l.forward(&x, mode)?;
            skips.push(x.clone());
        }
        let latent = self.head.forward(&nn::global_avg_pool(&x)?)?;
        debug_assert_eq!(latent.dim(1)?, CONTENT_LATENT_DIM);
        Ok(ContentEncoding { latent, skips })
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<ContentEncoding> {
        self.forward(&stack_nchw(std::slice::from_ref(image), DType::F32)?, Mode::Eval)
    }
}

impl Model for ContentEncoder {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl Embedder for ContentEncoder {
    fn embedding_dim(&self) -> usize {
        CONTENT_LATENT_DIM
    }
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, Mode::Eval)?.latent)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct StyleEncoding {
    pub latent: Tensor,
}

struct DenseLayer {
    bn: BatchNorm2d,
    conv: Conv2d,
}

struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

/// Densely connected style encoder: within a block each layer sees the
/// concatenation of the block input and every earlier layer output.
pub struct StyleEncoder {
    cfg: StyleEncoderConfig,
    params: ParamSet,
    stem: ConvBnAct,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
    head: Linear,
}

impl StyleEncoder {
    pub fn new(cfg: &StyleEncoderConfig, seed: u64) -> Result<Self> {
        if cfg.blocks == 0 || cfg.layers_per_block == 0 || cfg.growth_rate == 0 || cfg.stem_channels == 0 {
            return Err(Error::Config(vec![
                "style_encoder widths, blocks and layers must be >= 1".into(),
            ]));
        }
        let mut params = ParamSet::default();
        let mut rng = seeded(seed, 5);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let stem = ConvBnAct::new(&mut pb.sub("stem"), 3, cfg.stem_channels, 3, 2, 1, true, Act::Relu)?;
        let mut c = cfg.stem_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for b in 0..cfg.blocks {
            let mut layers = Vec::new();
            for i in 0..cfg.layers_per_block {
                let mut lb = pb.sub(format!("block{b}.layer{i}"));
                layers.push(DenseLayer {
                    bn: BatchNorm2d::new(&mut lb.sub("bn"), c)?,
                    conv: Conv2d::new(&mut lb.sub("conv"), c, cfg.growth_rate, 3, 1, 1, false)?,
                });
                c += cfg.growth_rate;
            }
            blocks.push(layers);
            if b + 1 < cfg.blocks {
                let c_out = ((c as f64 * cfg.compression).floor() as usize).max(1);
                let mut tb = pb.sub(format!("transition{b}"));
                transitions.push(Transition {
                    bn: BatchNorm2d::new(&mut tb.sub("bn"), c)?,
                    conv: Conv2d::new(&mut tb.sub("conv"), c, c_out, 1, 1, 0, false)?,
                });
                c = c_out;
            }
        }
        let final_bn = BatchNorm2d::new(&mut pb.sub("final.bn"), c)?;
        let head = Linear::new(&mut pb.sub("latent"), c, cfg.latent_dim)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            stem,
            blocks,
            transitions,
            final_bn,
            head,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// Channel count after each dense block.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut c = self.cfg.stem_channels;
        for (b, layers) in self.blocks.iter().enumerate() {
            c += layers.len() * self.cfg.growth_rate;
            out.push(c);
            if let Some(t) = self.transitions.get(b) {
                c = t.conv.out_channels();
            }
        }
        out
    }

    /// Runs the trunk and returns the latent plus per-block feature maps
    /// (before the transition layer).
    pub fn forward_features(&self, images: &Tensor, mode: Mode) -> Result<(Tensor, Vec<Tensor>)> {
        check_rgb(images)?;
        let mut x = self.stem.forward(images, mode)?;
        let mut feats = Vec::new();
        for (b, layers) in self.blocks.iter().enumerate() {
            for layer in layers {
                let y = layer.conv.forward(&nn::relu(&layer.bn.forward(&x, mode)?)?)?;
                x = Tensor::cat(&[&x, &y], 1)?;
            }
            feats.push(x.clone());
            if let Some(t) = self.transitions.get(b) {
                let y = t.conv.forward(&nn::relu(&t.bn.forward(&x, mode)?)?)?;
                x = avg_pool2(&y)?;
            }
        }
        let x = nn::relu(&self.final_bn.forward(&x, mode)?)?;
        Ok((self.head.forward(&nn::global_avg_pool(&x)?)?, feats))
    }

    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<StyleEncoding> {
        Ok(StyleEncoding {
            latent: self.forward_features(images, mode)?.0,
        })
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<StyleEncoding> {
        self.forward(&stack_nchw(std::slice::from_ref(image), DType::F32)?, Mode::Eval)
    }
}

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("cannot 2x2-pool a {h}x{w} map")));
    }
    Ok(x.reshape((n, c, h / 2, 2, w / 2, 2))?.mean(5)?.mean(3)?)
}

impl Model for StyleEncoder {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

impl Embedder for StyleEncoder {
    fn embedding_dim(&self) -> usize {
        self.cfg.latent_dim
    }
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.forward(images, Mode::Eval)?.latent)
    }
}

// ---------------------------------------------------------------------------

struct DecoderLevel {
    level: usize,
    uses_skip: bool,
    block: ConvBnAct,
}

/// Style-seeded upsampling decoder fed by content skips.
pub struct Decoder {
    params: ParamSet,
    skip_channels: Vec<usize>,
    seed_proj: Linear,
    /// Deep to shallow.
    levels: Vec<DecoderLevel>,
    output: Conv2d,
    calls: AtomicU64,
}

impl Decoder {
    pub fn new(skip_channels: &[usize], latent_dim: usize, cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        let depth = skip_channels.len();
        if depth == 0 {
            return Err(Error::Config(vec!["decoder needs at least one level".into()]));
        }
        let used = |l: usize| cfg.skip_levels.as_ref().is_none_or(|v| v.contains(&l));
        let mut params = ParamSet::default();
        let mut rng = seeded(seed, 6);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let c_deep = skip_channels[depth - 1];
        let seed_proj = Linear::new(&mut pb.sub("seed"), latent_dim, c_deep)?;
        let mut levels = Vec::with_capacity(depth);
        let mut prev = c_deep;
        for l in (0..depth).rev() {
            let uses_skip = used(l);
            let c_in = prev + if uses_skip { skip_channels[l] } else { 0 };
            let c_out = skip_channels[l];
            levels.push(DecoderLevel {
                level: l,
                uses_skip,
                block: ConvBnAct::new(&mut pb.sub(format!("level{l}")), c_in, c_out, 3, 1, 1, true, Act::Relu)?,
            });
            prev = c_out;
        }
        let output = Conv2d::new(&mut pb.sub("output"), prev, 3, 3, 1, 1, true)?;
        Ok(Self {
            params,
            skip_channels: skip_channels.to_vec(),
            seed_proj,
            levels,
            output,
            calls: AtomicU64::new(0),
        })
    }

    /// Number of forward passes so far (training audit).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn forward(&self, style_latent: &Tensor, skips: &[Tensor], mode: Mode) -> Result<Tensor> {
        if skips.len() != self.skip_channels.len() {
            return Err(Error::shape(format!(
                "decoder expects {} skips, got {}",
                self.skip_channels.len(),
                skips.len()
            )));
        }
        let (n, _, h0, w0) = skips[0].dims4()?;
        for (l, s) in skips.iter().enumerate() {
            let want = (n, self.skip_channels[l], h0 >> l, w0 >> l);
            if s.dims4()? != want {
                return Err(Error::shape(format!(
                    "skip at level {l} has shape {:?}, expected {:?}",
                    s.dims(),
                    [want.0, want.1, want.2, want.3]
                )));
            }
        }
        if style_latent.dims2()?.0 != n {
            return Err(Error::shape(format!(
                "style latent batch {} does not match skips batch {n}",
                style_latent.dim(0)?
            )));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let deep = &skips[skips.len() - 1];
        let (_, c_deep, hd, wd) = deep.dims4()?;
        let mut x = self
            .seed_proj
            .forward(style_latent)?
            .reshape((n, c_deep, 1, 1))?
            .broadcast_as((n, c_deep, hd, wd))?
            .contiguous()?;
        for dl in &self.levels {
            let inp = if dl.uses_skip {
                Tensor::cat(&[&x, &skips[dl.level]], 1)?
            } else {
                x
            };
            x = dl.block.forward(&inp, mode)?;
            if dl.level > 0 {
                x = nn::upsample2x(&x)?;
            }
        }
        nn::bounded_tanh(&self.output.forward(&x)?)
    }
}

impl Model for Decoder {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

// ---------------------------------------------------------------------------

/// Content encoder, style encoder and decoder composed into a generator.
pub struct GeneratorA2 {
    cfg: A2Config,
    pub content_encoder: ContentEncoder,
    pub style_encoder: StyleEncoder,
    pub decoder: Decoder,
}

impl GeneratorA2 {
    pub fn new(cfg: &A2Config, seed: u64) -> Result<Self> {
        config_err(cfg.validation_errors())?;
        let content_encoder = ContentEncoder::new(&cfg.content_encoder, seed)?;
        let style_encoder = StyleEncoder::new(&cfg.style_encoder, seed)?;
        let decoder = Decoder::new(
            &content_encoder.skip_channels(),
            cfg.style_encoder.latent_dim,
            &cfg.decoder,
            seed,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            content_encoder,
            style_encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &A2Config {
        &self.cfg
    }

    pub fn forward(&self, content: &Tensor, style: &Tensor, mode: Mode) -> Result<Tensor> {
        let (nc, hc, wc) = check_rgb(content)?;
        let (ns, _, _) = check_rgb(style)?;
        if nc != ns {
            return Err(Error::shape(format!("content batch {nc} and style batch {ns} differ")));
        }
        let enc = self.content_encoder.forward(content, mode)?;
        let sty = self.style_encoder.forward(style, mode)?;
        let out = self.decoder.forward(&sty.latent, &enc.skips, mode)?;
        debug_assert_eq!(out.dims4()?.2, hc);
        debug_assert_eq!(out.dims4()?.3, wc);
        Ok(out)
    }

    pub fn breakdown(&self) -> Vec<(String, usize)> {
        vec![
            ("content_encoder".into(), self.content_encoder.param_count()),
            ("style_encoder".into(), self.style_encoder.param_count()),
            ("decoder".into(), self.decoder.param_count()),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.breakdown().iter().map(|(_, n)| n).sum()
    }

    pub fn all_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        set.extend_prefixed("content_encoder", self.content_encoder.params());
        set.extend_prefixed("style_encoder", self.style_encoder.params());
        set.extend_prefixed("decoder", self.decoder.params());
        set
    }
}

impl StyleTransfer for GeneratorA2 {
    fn transfer_batch(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        self.forward(content, style, Mode::Eval)
    }
}

//! Network definitions for both architectures.
//!
//! * [`a1`]: paired dual-headed cGAN (6-channel U-Net generator, patch
//!   content discriminator, wavelet-CNN style discriminator).
//! * [`a2`]: unpaired generator whose content and style encoders double as
//!   discriminators, plus the skip-fed decoder.

pub mod a1;
pub mod a2;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::{stack_nchw, unstack_nchw, ImageTensor};
use crate::nn::{BatchNorm2d, Conv2d, Mode, ParamBuilder, ParamSet};

/// Anything that owns named parameters.
pub trait Model {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Total trainable scalars.
    fn param_count(&self) -> usize {
        self.params().param_count()
    }
}

/// Maps images to fixed-length embeddings (inference mode).
pub trait Embedder {
    fn embedding_dim(&self) -> usize;
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor>;
}

/// Image-pair to image mapping used for inference and grid export.
pub trait StyleTransfer {
    /// Batched `N x 3 x H x W` forward pass in inference mode.
    fn transfer_batch(&self, content: &Tensor, style: &Tensor) -> Result<Tensor>;

    fn transfer(&self, content: &ImageTensor, style: &ImageTensor) -> Result<ImageTensor> {
        let c = stack_nchw(std::slice::from_ref(content), DType::F32)?;
        let s = stack_nchw(std::slice::from_ref(style), DType::F32)?;
        let out = self.transfer_batch(&c, &s)?;
        Ok(unstack_nchw(&out)?.remove(0))
    }
}

pub(crate) fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn is_pow2(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

/// `min(base * 2^level, max)`.
pub(crate) fn width(base: usize, level: usize, max: usize) -> usize {
    base.saturating_mul(1 << level.min(20)).min(max)
}

/// Activation following a normalised convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Act {
    Relu,
    Leaky(f64),
}

impl Act {
    pub(crate) fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Act::Relu => crate::nn::relu(x),
            Act::Leaky(s) => crate::nn::leaky_relu(x, s),
        }
    }
}

/// `Conv -> [BatchNorm] -> activation`.
#[derive(Clone, Debug)]
pub(crate) struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub act: Act,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        pb: &mut ParamBuilder,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        norm: bool,
        act: Act,
    ) -> Result<Self> {
        // A bias in front of batch norm is redundant.
        let conv = Conv2d::new(&mut pb.sub("conv"), c_in, c_out, k, stride, pad, !norm)?;
        let bn = if norm {
            Some(BatchNorm2d::new(&mut pb.sub("bn"), c_out)?)
        } else {
            None
        };
        Ok(Self { conv, bn, act })
    }

    pub(crate) fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.conv.forward(x)?;
        let y = match &self.bn {
            Some(bn) => bn.forward(&y, mode)?,
            None => y,
        };
        self.act.apply(&y)
    }
}

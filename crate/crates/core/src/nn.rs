//! Neural-network building blocks on top of `candle-core` tensors.
//!
//! Convolutions lower to an im2col custom op plus a batched matmul, which
//! keeps both the forward and the backward pass on the gemm fast path.
//! Parameters are plain [`Var`]s collected in a [`ParamSet`], so that
//! optimisers, checkpoints and audits can enumerate them by name.

use std::collections::HashSet;

use candle_core::{
    backprop::GradStore, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, TensorId,
    Var,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How layers with train/inference behaviour should act.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics; batch-norm running averages are updated.
    Train,
    /// Batch statistics without touching the running averages.
    TrainFrozenStats,
}

impl Mode {
    pub fn is_train(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

// ---------------------------------------------------------------------------
// im2col / col2im

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Calls `f(col_index, src_index)` for every in-bounds tap of one image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let p = ho * wo;
        let k = self.k;
        for ci in 0..self.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src_row = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row * p + oy * wo + ox, src_row + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn cols_len(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.c * self.k * self.k * ho * wo
    }
}

fn im2col_slice<T: Copy + Default>(src: &[T], b: usize, g: &ConvGeom) -> Vec<T> {
    let img = g.c * g.h * g.w;
    let cl = g.cols_len();
    let mut dst = vec![T::default(); b * cl];
    for bi in 0..b {
        let s = &src[bi * img..(bi + 1) * img];
        let d = &mut dst[bi * cl..(bi + 1) * cl];
        g.for_each_tap(|di, si| d[di] = s[si]);
    }
    dst
}

fn col2im_slice<T: Copy + Default + std::ops::AddAssign>(
    cols: &[T],
    b: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let img = g.c * g.h * g.w;
    let cl = g.cols_len();
    let mut dst = vec![T::default(); b * img];
    for bi in 0..b {
        let s = &cols[bi * cl..(bi + 1) * cl];
        let d = &mut dst[bi * img..(bi + 1) * img];
        g.for_each_tap(|ci, di| d[di] += s[ci]);
    }
    dst
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col/col2im expects a contiguous input"),
    }
}

/// `N x C x H x W` -> `N x (C k k) x (Ho Wo)`.
struct Im2Col(ConvGeom);

/// Adjoint of [`Im2Col`].
struct Col2Im(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (b, c, h, w) = l.shape().dims4()?;
        if (c, h, w) != (g.c, g.h, g.w) {
            candle_core::bail!("im2col geometry mismatch");
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_slice(contiguous_slice(v, l)?, b, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_slice(contiguous_slice(v, l)?, b, &g)),
            _ => candle_core::bail!("im2col supports f32/f64 only"),
        };
        let (ho, wo) = g.out_hw();
        Ok((out, Shape::from((b, c * g.k * g.k, ho * wo))))
    }

    fn bwd(
        &self,
        _arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(
            grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?,
        ))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let b = l.shape().dims()[0];
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_slice(contiguous_slice(v, l)?, b, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_slice(contiguous_slice(v, l)?, b, &g)),
            _ => candle_core::bail!("col2im supports f32/f64 only"),
        };
        Ok((out, Shape::from((b, g.c, g.h, g.w))))
    }
}

/// 2-D cross-correlation with square kernels and symmetric zero padding.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} too small for kernel {k} (pad {pad})"
        )));
    }
    let g = ConvGeom {
        c,
        h,
        w,
        k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = weight.reshape((co, c * k * k))?;
    let out = wm.broadcast_matmul(&cols)?.reshape((b, co, ho, wo))?;
    Ok(match bias {
        Some(bias) => out.broadcast_add(&bias.reshape((1, co, 1, 1))?)?,
        None => out,
    })
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Logistic sigmoid; inputs are clamped to `[-30, 30]` so the backward
/// pass never multiplies an infinite `exp` by a zero gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(-30.0, 30.0)?.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// `tanh` with the pre-activation clamped to `[-8, 8]`, keeping `f32`
/// outputs strictly inside `(-1, 1)`.
pub fn bounded_tanh(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(-8.0, 8.0)?.tanh()?)
}

/// Inverted dropout with an explicit RNG; identity outside training.
pub fn dropout(x: &Tensor, rate: f32, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
    if !mode.is_train() || rate <= 0.0 {
        return Ok(x.clone());
    }
    let rng = rng.ok_or_else(|| Error::arg("training-mode dropout needs an RNG"))?;
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f32> = (0..x.elem_count())
        .map(|_| if rng.random::<f32>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok((x * mask)?)
}

/// Global average pool: `N x C x H x W` -> `N x C`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    Ok(x.mean_keepdim(3)?.mean_keepdim(2)?.reshape((n, c))?)
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}

// ---------------------------------------------------------------------------
// Parameters

/// A named tensor owned by a model. Non-trainable entries (batch-norm
/// running statistics) are checkpointed but never optimised or counted.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

/// Ordered collection of a model's parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.trainable().map(|p| p.var.elem_count()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = false;
            n += 1;
        }
        n
    }

    pub fn ids(&self) -> HashSet<TensorId> {
        self.params.iter().map(|p| p.var.id()).collect()
    }

    pub fn trainable_ids(&self) -> HashSet<TensorId> {
        self.trainable().map(|p| p.var.id()).collect()
    }

    /// Host copy of every parameter, for snapshot comparisons.
    pub fn snapshot(&self) -> Result<Vec<(String, Vec<f32>)>> {
        self.params
            .iter()
            .map(|p| {
                let v = p
                    .var
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                Ok((p.name.clone(), v))
            })
            .collect()
    }

    pub(crate) fn push(&mut self, name: String, var: Var, trainable: bool) {
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            var,
            trainable,
        });
    }

    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for p in other.iter() {
            self.push(format!("{prefix}.{}", p.name), p.var.clone(), p.trainable);
        }
    }
}

/// Creates parameters under a dotted name prefix, drawing initial values
/// from an explicit RNG so construction is reproducible from a seed.
pub struct ParamBuilder<'a> {
    set: &'a mut ParamSet,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(set: &'a mut ParamSet, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            set,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            set: self.set,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, values: Vec<f32>, dims: &[usize], trainable: bool) -> Result<Var> {
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?;
        let var = Var::from_tensor(&t)?;
        self.set.push(self.full_name(name), var.clone(), trainable);
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f32) -> Result<Var> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0f32, std).map_err(|e| Error::arg(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.register(name, values, dims, true)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f32) -> Result<Var> {
        let n: usize = dims.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.register(name, values, dims, true)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f32, trainable: bool) -> Result<Var> {
        let n: usize = dims.iter().product();
        self.register(name, vec![value; n], dims, trainable)
    }
}

// ---------------------------------------------------------------------------
// Layers

const CONV_INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = pb.normal("weight", &[c_out, c_in, k, k], CONV_INIT_STD)?;
        let bias = if bias {
            Some(pb.constant("bias", &[c_out], 0.0, true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            self.weight.as_tensor(),
            self.bias.as_ref().map(|b| b.as_tensor()),
            self.stride,
            self.pad,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Output spatial size for an input of side `n`.
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel()) / self.stride + 1
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        let weight = pb.uniform("weight", &[d_out, d_in], bound)?;
        let bias = pb.constant("bias", &[d_out], 0.0, true)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0, true)?,
            beta: pb.constant("beta", &[channels], 0.0, true)?,
            running_mean: pb.constant("running_mean", &[channels], 0.0, false)?,
            running_var: pb.constant("running_var", &[channels], 1.0, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Eval => (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            ),
            Mode::Train | Mode::TrainFrozenStats => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered
                    .sqr()?
                    .mean_keepdim(0)?
                    .mean_keepdim(2)?
                    .mean_keepdim(3)?;
                if mode == Mode::Train {
                    let count = (n * h * w) as f64;
                    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                    let m = self.momentum;
                    let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))?
                        + (mean.detach().reshape(c)? * m)?)?;
                    let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                        + (var.detach().reshape(c)? * (m * unbiased))?)?;
                    self.running_mean.set(&new_mean)?;
                    self.running_var.set(&new_var)?;
                }
                (mean, var)
            }
        };
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

/// Per-sample, per-channel normalisation with a learned affine map.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(pb: &mut ParamBuilder, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.constant("gamma", &[channels], 1.0, true)?,
            beta: pb.constant("beta", &[channels], 0.0, true)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let mean = x.mean_keepdim(2)?.mean_keepdim(3)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?.mean_keepdim(3)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?)
    }
}

// ---------------------------------------------------------------------------
// Optimiser

/// Adaptive-moment optimiser over one parameter group.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Elementwise gradient clamp, disabled when `None`.
    pub clip: Option<f64>,
    step: u64,
    slots: Vec<AdamSlot>,
}

#[derive(Debug)]
struct AdamSlot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Host-side copy of an optimiser's state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// `(param name, first moment, second moment)`.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, betas: (f64, f64)) -> Result<Self> {
        let slots = params
            .trainable()
            .map(|p| {
                let z = p.var.zeros_like()?;
                Ok(AdamSlot {
                    name: p.name.clone(),
                    var: p.var.clone(),
                    m: z.clone(),
                    v: z,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            clip: None,
            step: 0,
            slots,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn var_ids(&self) -> HashSet<TensorId> {
        self.slots.iter().map(|s| s.var.id()).collect()
    }

    /// Applies one update to every parameter that received a gradient and
    /// returns the ids of the updated variables.
    pub fn step(&mut self, grads: &GradStore) -> Result<HashSet<TensorId>> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut updated = HashSet::new();
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = match self.clip {
                Some(c) => g.clamp(-c, c)?,
                None => g.clone(),
            };
            slot.m = ((&slot.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            slot.v = ((&slot.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let delta = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            let next = (slot.var.as_tensor().detach() - (delta * self.lr)?)?;
            slot.var.set(&next)?;
            updated.insert(slot.var.id());
        }
        Ok(updated)
    }

    pub fn export(&self) -> Result<AdamState> {
        let moments = self
            .slots
            .iter()
            .map(|s| {
                Ok((
                    s.name.clone(),
                    s.m.flatten_all()?.to_vec1::<f32>()?,
                    s.v.flatten_all()?.to_vec1::<f32>()?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(AdamState {
            step: self.step,
            moments,
        })
    }

    pub fn import(&mut self, state: &AdamState) -> Result<()> {
        if state.moments.len() != self.slots.len() {
            return Err(Error::Checkpoint(format!(
                "optimiser state has {} slots, expected {}",
                state.moments.len(),
                self.slots.len()
            )));
        }
        for (slot, (name, m, v)) in self.slots.iter_mut().zip(&state.moments) {
            if &slot.name != name || m.len() != slot.var.elem_count() || v.len() != m.len() {
                return Err(Error::Checkpoint(format!(
                    "optimiser slot {name} does not match parameter {}",
                    slot.name
                )));
            }
            let shape = slot.var.shape().clone();
            slot.m = Tensor::from_vec(m.clone(), &shape, &Device::Cpu)?;
            slot.v = Tensor::from_vec(v.clone(), &shape, &Device::Cpu)?;
        }
        self.step = state.step;
        Ok(())
    }
}

//! Training objectives.
//!
//! Every loss takes and returns `candle` tensors so it can sit inside an
//! autograd graph; all of them work in `f32` for training and `f64` for
//! gradient checking. Scalars come back as rank-0 tensors.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv2d;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Added under the square root of pair distances so the gradient stays
/// finite for coincident embeddings.
const DIST_EPS: f64 = 1e-12;

/// SSIM window side and Gaussian width.
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
/// Dynamic range of network images (`[-1, 1]`).
pub const SSIM_DATA_RANGE: f64 = 2.0;

/// Mixing weights of the combined generator objective: `alpha` trades the
/// style adversarial term against the content one, `lambda_l1` scales the
/// reconstruction term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialWeights {
    pub alpha: f64,
    pub lambda_l1: f64,
}

impl Default for AdversarialWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda_l1: 100.0,
        }
    }
}

impl AdversarialWeights {
    pub fn new(alpha: f64, lambda_l1: f64) -> Result<Self> {
        let w = Self { alpha, lambda_l1 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::arg(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.lambda_l1 >= 0.0) || !self.lambda_l1.is_finite() {
            return Err(Error::arg(format!(
                "lambda_l1 must be a finite non-negative number, got {}",
                self.lambda_l1
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairLabel {
    Negative = 0,
    Positive = 1,
}

impl PairLabel {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            PairLabel::Positive
        } else {
            PairLabel::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == PairLabel::Positive
    }
}

/// Distance margins of the pairwise loss: positives are pulled inside
/// `positive`, negatives pushed beyond `negative`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub positive: f64,
    pub negative: f64,
}

impl Default for Margins {
    fn default() -> Self {
        Self {
            positive: 0.0,
            negative: 1.0,
        }
    }
}

impl Margins {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive >= 0.0 && self.negative > self.positive) {
            return Err(Error::arg(format!(
                "margins need negative > positive >= 0, got ({}, {})",
                self.positive, self.negative
            )));
        }
        Ok(())
    }
}

/// Class labels of a style sample batch together with the Gram
/// temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleBatchLabels {
    pub ys: Vec<usize>,
    pub gamma: f64,
}

impl StyleBatchLabels {
    pub fn new(ys: Vec<usize>, gamma: f64, num_classes: usize) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::arg(format!("gamma must be positive, got {gamma}")));
        }
        if let Some(bad) = ys.iter().find(|&&y| y >= num_classes) {
            return Err(Error::arg(format!(
                "class index {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self { ys, gamma })
    }
}

/// Customary dot-product temperature for embeddings of length `dim`.
pub fn default_gamma(dim: usize) -> f64 {
    (dim as f64).sqrt()
}

fn ensure_nonempty(t: &Tensor, what: &str) -> Result<()> {
    if t.elem_count() == 0 {
        return Err(Error::arg(format!("{what} is empty")));
    }
    Ok(())
}

fn ensure_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Discriminator binary cross-entropy, written as a quantity to minimise:
/// `-mean(log d_real) - mean(log(1 - d_fake))`.
pub fn bce_discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    ensure_nonempty(d_real, "real probability batch")?;
    ensure_nonempty(d_fake, "fake probability batch")?;
    let real = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS)?.log()?.mean_all()?;
    let fake = d_fake
        .clamp(PROB_EPS, 1.0 - PROB_EPS)?
        .affine(-1.0, 1.0)?
        .log()?
        .mean_all()?;
    Ok((real + fake)?.neg()?)
}

/// Non-saturating generator loss `-mean(log d_fake)`.
pub fn bce_generator_loss(d_fake: &Tensor) -> Result<Tensor> {
    ensure_nonempty(d_fake, "fake probability batch")?;
    Ok(d_fake
        .clamp(PROB_EPS, 1.0 - PROB_EPS)?
        .log()?
        .mean_all()?
        .neg()?)
}

/// `alpha * loss_style + (1 - alpha) * loss_content`.
pub fn rgan_combine(
    weights: &AdversarialWeights,
    loss_style: &Tensor,
    loss_content: &Tensor,
) -> Result<Tensor> {
    Ok(((loss_style * weights.alpha)? + (loss_content * (1.0 - weights.alpha))?)?)
}

/// Mean absolute difference.
pub fn l1_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    ensure_same_shape(generated, target, "l1 operands differ in shape")?;
    ensure_nonempty(generated, "l1 operand")?;
    Ok((generated - target)?.abs()?.mean_all()?)
}

fn as_rows(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        1 => Ok(t.unsqueeze(0)?),
        2 => Ok(t.clone()),
        r => Err(Error::shape(format!(
            "embeddings must be rank 1 or 2, got rank {r}"
        ))),
    }
}

/// Per-pair Euclidean distances of two `B x d` embedding batches.
pub fn pair_distances(emb_a: &Tensor, emb_b: &Tensor) -> Result<Tensor> {
    let (a, b) = (as_rows(emb_a)?, as_rows(emb_b)?);
    ensure_same_shape(&a, &b, "paired embeddings differ in length")?;
    Ok(((a - b)?.sqr()?.sum(1)? + DIST_EPS)?.sqrt()?)
}

/// Two-margin contrastive loss averaged over pairs:
/// positives cost `max(0, d - m_pos)^2`, negatives `max(0, m_neg - d)^2`.
///
/// Accepts single embeddings (rank 1) or `B x d` batches with one label per
/// row.
pub fn pairwise_marginal_loss(
    emb_a: &Tensor,
    emb_b: &Tensor,
    labels: &[PairLabel],
    margins: Margins,
) -> Result<Tensor> {
    margins.validate()?;
    let (a, b) = (as_rows(emb_a)?, as_rows(emb_b)?);
    ensure_same_shape(&a, &b, "paired embeddings differ in length")?;
    let n = a.dim(0)?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} embedding pairs",
            labels.len()
        )));
    }
    ensure_nonempty(&a, "embedding batch")?;
    let sq = (&a - &b)?.sqr()?.sum(1)?;
    let dist = (&sq + DIST_EPS)?.sqrt()?;
    let pos = if margins.positive == 0.0 {
        sq
    } else {
        (&dist - margins.positive)?.relu()?.sqr()?
    };
    let neg = dist.affine(-1.0, margins.negative)?.relu()?.sqr()?;
    let y: Vec<f64> = labels
        .iter()
        .map(|l| if l.is_positive() { 1.0 } else { 0.0 })
        .collect();
    let y = Tensor::from_vec(y, n, a.device())?.to_dtype(a.dtype())?;
    let per_pair = ((&y * pos)? + (y.affine(-1.0, 1.0)? * neg)?)?;
    Ok(per_pair.mean_all()?)
}

/// Temperature-scaled similarity `H[i, k] = <anchor_i, style_k> / gamma`
/// between a `Ba x d` anchor batch and a `Bs x d` style batch.
pub fn gram_similarity(xa: &Tensor, xs: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(Error::arg(format!("gamma must be positive, got {gamma}")));
    }
    let (_, da) = xa.dims2()?;
    let (_, ds) = xs.dims2()?;
    if da != ds {
        return Err(Error::shape(format!(
            "anchor embedding length {da} != style embedding length {ds}"
        )));
    }
    Ok((xa.matmul(&xs.t()?)? / gamma)?)
}

/// Negative log-likelihood of each anchor's class under a row softmax of
/// `h`: `-log sum_{k : y_k = y_i} softmax(h_i)_k`, averaged over anchors.
/// With one style sample per class this is sparse categorical
/// cross-entropy.
pub fn style_class_nll(
    h: &Tensor,
    style_labels: &[usize],
    anchor_labels: &[usize],
) -> Result<Tensor> {
    let (ba, bs) = h.dims2()?;
    if ba != anchor_labels.len() || bs != style_labels.len() {
        return Err(Error::shape(format!(
            "similarity matrix {ba}x{bs} vs {} anchor / {} style labels",
            anchor_labels.len(),
            style_labels.len()
        )));
    }
    if ba == 0 || bs == 0 {
        return Err(Error::arg("similarity matrix is empty"));
    }
    let mut mask = vec![0f64; ba * bs];
    for (i, &ya) in anchor_labels.iter().enumerate() {
        let mut found = false;
        for (k, &ys) in style_labels.iter().enumerate() {
            if ys == ya {
                mask[i * bs + k] = 1.0;
                found = true;
            }
        }
        if !found {
            return Err(Error::arg(format!(
                "anchor class {ya} does not appear in the style batch"
            )));
        }
    }
    let mask = Tensor::from_vec(mask, (ba, bs), h.device())?.to_dtype(h.dtype())?;
    let lse_all = logsumexp_rows(h)?;
    // Unmatched columns are pushed to -1e30 so they vanish from the sum.
    let masked = ((h * &mask)? + (mask.affine(1.0, -1.0)? * 1e30)?)?;
    let lse_match = logsumexp_rows(&masked)?;
    Ok((lse_all - lse_match)?.mean_all()?)
}

fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()?;
    Ok((s + m)?.squeeze(1)?)
}

fn gaussian_window(dtype: DType, device: &Device) -> Result<Tensor> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (total * total));
        }
    }
    Ok(Tensor::from_vec(w, (1, 1, SSIM_WINDOW, SSIM_WINDOW), device)?.to_dtype(dtype)?)
}

/// Mean local SSIM over `N x C x H x W` images, using a 7x7 Gaussian window
/// (sigma 1.5, valid positions only) and the usual stabilisers
/// `(0.01 L)^2`, `(0.03 L)^2` with `L = 2`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b, "ssim operands differ in shape")?;
    let (n, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window(a.dtype(), a.device())?;
    let filt = |t: &Tensor| conv2d(&t.reshape((n * c, 1, h, w))?, &win, None, 1, 0);
    let c1 = (0.01 * SSIM_DATA_RANGE).powi(2);
    let c2 = (0.03 * SSIM_DATA_RANGE).powi(2);
    let mu_a = filt(a)?;
    let mu_b = filt(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (filt(&a.sqr()?)? - &mu_aa)?;
    let var_b = (filt(&b.sqr()?)? - &mu_bb)?;
    let cov = (filt(&(a * b)?)? - &mu_ab)?;
    let num = ((mu_ab * 2.0)? + c1)?.mul(&((cov * 2.0)? + c2)?)?;
    let den = ((mu_aa + mu_bb)? + c1)?.mul(&((var_a + var_b)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// `1 - ssim(generated, target)`.
pub fn ssim_loss(generated: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(ssim(generated, target)?.affine(-1.0, 1.0)?)
}

/// `w * ssim_loss + (1 - w) * l1_loss`.
pub fn mix_loss(generated: &Tensor, target: &Tensor, w: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::arg(format!("mix weight must lie in [0, 1], got {w}")));
    }
    let s = ssim_loss(generated, target)?;
    let l = l1_loss(generated, target)?;
    Ok(((s * w)? + (l * (1.0 - w))?)?)
}

/// Reads a rank-0 tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    fn t2(v: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::from_vec(v.to_vec(), (r, c), &Device::Cpu).unwrap()
    }

    fn s(t: Result<Tensor>) -> f64 {
        scalar(&t.unwrap()).unwrap()
    }

    #[test]
    fn bce_reference_points() {
        let e = PROB_EPS;
        assert!(s(bce_discriminator_loss(&t1(&[1.0 - e]), &t1(&[e]))) < 1e-6);
        assert!((s(bce_discriminator_loss(&t1(&[0.5]), &t1(&[0.5]))) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(s(bce_generator_loss(&t1(&[1.0 - e]))) < 1e-6);
        assert!((s(bce_generator_loss(&t1(&[0.5]))) - 2f64.ln()).abs() < 1e-12);
        assert!(bce_generator_loss(&t1(&[])).is_err());
        assert!(bce_discriminator_loss(&t1(&[]), &t1(&[0.5])).is_err());
    }

    #[test]
    fn bce_clamps_saturated_probabilities() {
        let v = s(bce_discriminator_loss(&t1(&[0.0]), &t1(&[1.0])));
        assert!(v.is_finite());
        assert!((v - 2.0 * -(PROB_EPS.ln())).abs() < 1e-3);
    }

    #[test]
    fn combine_weights() {
        let (ls, lc) = (t1(&[7.0]).squeeze(0).unwrap(), t1(&[3.0]).squeeze(0).unwrap());
        let w = |a| AdversarialWeights::new(a, 100.0).unwrap();
        assert_eq!(s(rgan_combine(&w(1.0), &ls, &lc)), 7.0);
        assert_eq!(s(rgan_combine(&w(0.0), &ls, &lc)), 3.0);
        let (ls, lc) = (t1(&[2.0]).squeeze(0).unwrap(), t1(&[4.0]).squeeze(0).unwrap());
        assert_eq!(s(rgan_combine(&w(0.5), &ls, &lc)), 3.0);
        assert!(AdversarialWeights::new(1.5, 1.0).is_err());
        assert!(AdversarialWeights::new(0.5, -1.0).is_err());
    }

    #[test]
    fn l1_reference_points() {
        let x = t2(&[0.1, 0.2, 0.3, 0.4], 2, 2);
        assert_eq!(s(l1_loss(&x, &x)), 0.0);
        let ones = Tensor::ones((2, 3), DType::F64, &Device::Cpu).unwrap();
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(s(l1_loss(&ones, &zeros)), 1.0);
        assert!(matches!(l1_loss(&ones, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn pairwise_reference_points() {
        let m = Margins::default();
        let a = t1(&[0.3, -0.2, 0.9]);
        assert!(s(pairwise_marginal_loss(&a, &a, &[PairLabel::Positive], m)) < 1e-12);
        let b = t1(&[0.3, -0.2, 2.5]);
        assert_eq!(s(pairwise_marginal_loss(&a, &b, &[PairLabel::Negative], m)), 0.0);
        let z = t1(&[0.0, 0.0]);
        let v = s(pairwise_marginal_loss(&z, &z, &[PairLabel::Negative], m));
        assert!((v - 1.0).abs() < 1e-5);
        assert!(pairwise_marginal_loss(&a, &z, &[PairLabel::Negative], m).is_err());
        let bad = Margins { positive: 1.0, negative: 0.5 };
        assert!(pairwise_marginal_loss(&a, &a, &[PairLabel::Positive], bad).is_err());
    }

    #[test]
    fn pairwise_with_positive_margin() {
        let m = Margins { positive: 0.5, negative: 2.0 };
        let a = t1(&[0.0, 0.0]);
        let b = t1(&[3.0, 4.0]);
        // d = 5: positive costs (5 - 0.5)^2, negative is satisfied.
        assert!((s(pairwise_marginal_loss(&a, &b, &[PairLabel::Positive], m)) - 20.25).abs() < 1e-9);
        assert_eq!(s(pairwise_marginal_loss(&a, &b, &[PairLabel::Negative], m)), 0.0);
    }

    #[test]
    fn gram_identity() {
        let i2 = t2(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let h: Vec<Vec<f64>> = gram_similarity(&i2, &i2, 1.0).unwrap().to_vec2().unwrap();
        assert_eq!(h, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let h: Vec<Vec<f64>> = gram_similarity(&i2, &i2, 2.0).unwrap().to_vec2().unwrap();
        assert_eq!(h, vec![vec![0.5, 0.0], vec![0.0, 0.5]]);
        assert!(gram_similarity(&i2, &i2, 0.0).is_err());
        assert!(gram_similarity(&i2, &t2(&[1.0, 2.0, 3.0], 1, 3), 1.0).is_err());
    }

    #[test]
    fn gram_temperature_interchange() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xa: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (t2(&xa, 3, 4), t2(&xs, 5, 4));
        let g0 = 3.7;
        let h1: Vec<Vec<f64>> = gram_similarity(&(&a * g0).unwrap(), &b, g0 * 2.0).unwrap().to_vec2().unwrap();
        let h2: Vec<Vec<f64>> = gram_similarity(&a, &b, 2.0).unwrap().to_vec2().unwrap();
        for (r1, r2) in h1.iter().zip(&h2) {
            for (x, y) in r1.iter().zip(r2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nll_reference_points() {
        let h = t2(&[0.0; 4], 1, 4);
        let v = s(style_class_nll(&h, &[0, 1, 2, 3], &[2]));
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let h = t2(&[50.0, 0.0, 0.0, 0.0], 1, 4);
        assert!(s(style_class_nll(&h, &[0, 1, 2, 3], &[0])) < 1e-12);
        match style_class_nll(&h, &[0, 1, 2, 3], &[7]) {
            Err(Error::Argument(msg)) => assert!(msg.contains('7')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nll_handles_very_negative_matches() {
        let h = t2(&[-500.0, 0.0, 0.0], 1, 3).to_dtype(DType::F32).unwrap();
        let v = s(style_class_nll(&h, &[0, 1, 1], &[0]));
        assert!(v.is_finite());
        assert!((v - (500.0 + 2f64.ln())).abs() < 1e-2, "{v}");
    }

    #[test]
    fn nll_is_shift_invariant_per_row() {
        let h = t2(&[0.3, -1.0, 2.0, 0.5, 0.1, 0.2], 2, 3);
        let shifted = (&h + t2(&[5.0, 5.0, 5.0, -3.0, -3.0, -3.0], 2, 3)).unwrap();
        let a = s(style_class_nll(&h, &[0, 1, 0], &[0, 1]));
        let b = s(style_class_nll(&shifted, &[0, 1, 0], &[0, 1]));
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ssim_and_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..2 * 3 * 9 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(v, (2, 3, 9, 8), &Device::Cpu).unwrap();
        let y = (x.clone() * 0.5).unwrap();
        assert_eq!(s(ssim_loss(&x, &x)), 0.0);
        let sl = s(ssim_loss(&x, &y));
        assert!(sl > 0.0);
        assert_eq!(s(mix_loss(&x, &y, 0.0)), s(l1_loss(&x, &y)));
        assert_eq!(s(mix_loss(&x, &y, 1.0)), sl);
        let small = Tensor::zeros((1, 1, 6, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(ssim_loss(&small, &small), Err(Error::Shape(_))));
        assert!(mix_loss(&x, &y, 1.5).is_err());
    }

    #[test]
    fn style_labels_validate() {
        assert!(StyleBatchLabels::new(vec![0, 1, 2], 1.0, 3).is_ok());
        assert!(StyleBatchLabels::new(vec![0, 3], 1.0, 3).is_err());
        assert!(StyleBatchLabels::new(vec![0], 0.0, 3).is_err());
    }
}

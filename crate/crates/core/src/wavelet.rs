//! Orthonormal 2-D Haar multi-resolution analysis.
//!
//! For each 2x2 block `[a b; c d]` one level produces
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2
//! HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! `LH` is low-pass along x and high-pass along y, so it responds to
//! horizontal stripes; `HL` responds to vertical ones. The 4x4 analysis
//! matrix is symmetric and orthogonal, so synthesis applies the same
//! kernels and energy is preserved exactly.
//!
//! Two implementations live here: an array version over [`ImageTensor`]
//! used by data synthesis and tests, and a tensor version
//! ([`haar_level_tensor`]) that participates in autograd inside the style
//! discriminator.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Subbands produced by one decomposition level. Every band is half the
/// spatial size of the level's input.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandLevel {
    pub ll: ImageTensor,
    pub lh: ImageTensor,
    pub hl: ImageTensor,
    pub hh: ImageTensor,
}

impl SubbandLevel {
    pub fn details(&self) -> [&ImageTensor; 3] {
        [&self.lh, &self.hl, &self.hh]
    }
}

/// Multi-level decomposition of one raster. Level `l` (1-based) has shape
/// `(H / 2^l, W / 2^l, C)`. Only the deepest `LL` plus every detail band is
/// needed for reconstruction; intermediate `LL` bands are kept for
/// inspection and level-by-level consumers.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandPyramid {
    base_shape: (usize, usize, usize),
    levels: Vec<SubbandLevel>,
}

impl SubbandPyramid {
    /// Assembles a pyramid from raw levels; shapes are checked by
    /// [`haar_idwt2`].
    pub fn from_levels(base_shape: (usize, usize, usize), levels: Vec<SubbandLevel>) -> Self {
        Self { base_shape, levels }
    }

    pub fn base_shape(&self) -> (usize, usize, usize) {
        self.base_shape
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Level `l` counted from 1 (finest) to `num_levels()` (coarsest).
    pub fn level(&self, l: usize) -> &SubbandLevel {
        &self.levels[l - 1]
    }

    pub fn levels(&self) -> &[SubbandLevel] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [SubbandLevel] {
        &mut self.levels
    }

    /// Deepest approximation band.
    pub fn coarsest_ll(&self) -> &ImageTensor {
        &self.levels.last().expect("pyramid has at least one level").ll
    }
}

fn analysis_step(img: &ImageTensor) -> SubbandLevel {
    let (h, w, c) = img.shape();
    let (h2, w2) = (h / 2, w / 2);
    let mut ll = ImageTensor::zeros(h2, w2, c);
    let mut lh = ImageTensor::zeros(h2, w2, c);
    let mut hl = ImageTensor::zeros(h2, w2, c);
    let mut hh = ImageTensor::zeros(h2, w2, c);
    for y in 0..h2 {
        for x in 0..w2 {
            for ch in 0..c {
                let a = img.get(2 * y, 2 * x, ch);
                let b = img.get(2 * y, 2 * x + 1, ch);
                let cc = img.get(2 * y + 1, 2 * x, ch);
                let d = img.get(2 * y + 1, 2 * x + 1, ch);
                ll.set(y, x, ch, 0.5 * (a + b + cc + d));
                lh.set(y, x, ch, 0.5 * (a + b - cc - d));
                hl.set(y, x, ch, 0.5 * (a - b + cc - d));
                hh.set(y, x, ch, 0.5 * (a - b - cc + d));
            }
        }
    }
    SubbandLevel { ll, lh, hl, hh }
}

fn synthesis_step(
    ll: &ImageTensor,
    lh: &ImageTensor,
    hl: &ImageTensor,
    hh: &ImageTensor,
) -> ImageTensor {
    let (h2, w2, c) = ll.shape();
    let mut out = ImageTensor::zeros(h2 * 2, w2 * 2, c);
    for y in 0..h2 {
        for x in 0..w2 {
            for ch in 0..c {
                let (s, p, q, r) = (
                    ll.get(y, x, ch),
                    lh.get(y, x, ch),
                    hl.get(y, x, ch),
                    hh.get(y, x, ch),
                );
                out.set(2 * y, 2 * x, ch, 0.5 * (s + p + q + r));
                out.set(2 * y, 2 * x + 1, ch, 0.5 * (s + p - q - r));
                out.set(2 * y + 1, 2 * x, ch, 0.5 * (s - p + q - r));
                out.set(2 * y + 1, 2 * x + 1, ch, 0.5 * (s - p - q + r));
            }
        }
    }
    out
}

/// Checks that `(h, w)` supports `levels` dyadic decompositions.
pub fn check_divisible(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels < 1 {
        return Err(Error::arg("wavelet levels must be >= 1"));
    }
    let f = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::arg(format!("{levels} wavelet levels is too deep")))?;
    if h % f != 0 {
        return Err(Error::shape(format!(
            "height {h} is not divisible by 2^{levels} = {f}"
        )));
    }
    if w % f != 0 {
        return Err(Error::shape(format!(
            "width {w} is not divisible by 2^{levels} = {f}"
        )));
    }
    Ok(())
}

/// Recursive orthonormal Haar analysis; each level decomposes the previous
/// `LL` band.
pub fn haar_dwt2(image: &ImageTensor, levels: usize) -> Result<SubbandPyramid> {
    check_divisible(image.height(), image.width(), levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut current = image.clone();
    for _ in 0..levels {
        let level = analysis_step(&current);
        current = level.ll.clone();
        out.push(level);
    }
    Ok(SubbandPyramid {
        base_shape: image.shape(),
        levels: out,
    })
}

/// Exact inverse of [`haar_dwt2`], driven by the coarsest `LL` and the
/// detail bands of every level.
pub fn haar_idwt2(pyramid: &SubbandPyramid) -> Result<ImageTensor> {
    let levels = pyramid.levels.len();
    if levels == 0 {
        return Err(Error::shape("pyramid has no levels"));
    }
    let (h, w, c) = pyramid.base_shape;
    check_divisible(h, w, levels)?;
    let mut current = pyramid.coarsest_ll().clone();
    for l in (1..=levels).rev() {
        let expect = (h >> l, w >> l, c);
        let level = &pyramid.levels[l - 1];
        for (name, band) in [
            ("LL", &current),
            ("LH", &level.lh),
            ("HL", &level.hl),
            ("HH", &level.hh),
        ] {
            if band.shape() != expect {
                return Err(Error::shape(format!(
                    "level {l} {name} band has shape {:?}, expected {expect:?}",
                    band.shape()
                )));
            }
        }
        current = synthesis_step(&current, &level.lh, &level.hl, &level.hh);
    }
    Ok(current)
}

/// Sum of squares over every retained band (coarsest `LL` plus all detail
/// bands), accumulated in `f64`.
pub fn subband_energy(pyramid: &SubbandPyramid) -> f64 {
    let details: f64 = pyramid
        .levels
        .iter()
        .flat_map(|l| l.details())
        .map(ImageTensor::sum_sq)
        .sum();
    match pyramid.levels.last() {
        Some(last) => details + last.ll.sum_sq(),
        None => 0.0,
    }
}

/// One differentiable Haar level over an `N x C x H x W` tensor, returning
/// `(LL, LH, HL, HH)` each of shape `N x C x H/2 x W/2`.
pub fn haar_level_tensor(x: &Tensor) -> Result<[Tensor; 4]> {
    let (n, c, h, w) = x.dims4()?;
    check_divisible(h, w, 1)?;
    let (h2, w2) = (h / 2, w / 2);
    let x6 = x.reshape((n, c, h2, 2, w2, 2))?;
    let pick = |dy: usize, dx: usize| -> Result<Tensor> {
        Ok(x6
            .narrow(3, dy, 1)?
            .narrow(5, dx, 1)?
            .reshape((n, c, h2, w2))?)
    };
    let (a, b, cc, d) = (pick(0, 0)?, pick(0, 1)?, pick(1, 0)?, pick(1, 1)?);
    let ab_sum = (&a + &b)?;
    let ab_diff = (&a - &b)?;
    let cd_sum = (&cc + &d)?;
    let cd_diff = (&cc - &d)?;
    Ok([
        ((&ab_sum + &cd_sum)? * 0.5)?,
        ((&ab_sum - &cd_sum)? * 0.5)?,
        ((&ab_diff + &cd_diff)? * 0.5)?,
        ((&ab_diff - &cd_diff)? * 0.5)?,
    ])
}

/// Multi-level tensor decomposition; entry `l` holds level `l + 1`.
pub fn haar_dwt2_tensor(x: &Tensor, levels: usize) -> Result<Vec<[Tensor; 4]>> {
    let (_, _, h, w) = x.dims4()?;
    check_divisible(h, w, levels)?;
    let mut out = Vec::with_capacity(levels);
    let mut current = x.clone();
    for _ in 0..levels {
        let bands = haar_level_tensor(&current)?;
        current = bands[0].clone();
        out.push(bands);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::stack_nchw;
    use candle_core::DType;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.random::<f32>())
    }

    #[test]
    fn constant_image_has_no_detail() {
        let img = ImageTensor::filled(4, 4, 1, 0.3);
        let p = haar_dwt2(&img, 1).unwrap();
        let l = p.level(1);
        for band in l.details() {
            assert!(band.data().iter().all(|&v| v == 0.0));
        }
        assert!(l.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));
    }

    #[test]
    fn single_pixel_splits_evenly() {
        let mut img = ImageTensor::zeros(8, 8, 1);
        img.set(0, 0, 0, 1.0);
        let p = haar_dwt2(&img, 1).unwrap();
        let l = p.level(1);
        for band in [&l.ll, &l.lh, &l.hl, &l.hh] {
            let nz: Vec<_> = band.data().iter().filter(|v| **v != 0.0).collect();
            assert_eq!(nz.len(), 1);
            assert_eq!(*nz[0], 0.5);
            assert_eq!(band.get(0, 0, 0), 0.5);
        }
        let back = haar_idwt2(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 1e-6);
    }

    #[test]
    fn two_level_energy_of_random_image() {
        let img = random_image(8, 8, 1, 7);
        let p = haar_dwt2(&img, 2).unwrap();
        assert!((subband_energy(&p) - img.sum_sq()).abs() <= 1e-5);
    }

    #[test]
    fn ramp_energy_matches_direct_sum() {
        let img = ImageTensor::from_fn(16, 16, 2, |y, x, c| (y * 16 + x) as f32 / 256.0 + c as f32);
        let direct: f64 = img.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let p = haar_dwt2(&img, 2).unwrap();
        assert!((subband_energy(&p) - direct).abs() <= 1e-5 * direct);
    }

    #[test]
    fn zero_pyramid_reconstructs_zero() {
        let p = haar_dwt2(&ImageTensor::zeros(8, 8, 3), 3).unwrap();
        assert_eq!(subband_energy(&p), 0.0);
        let back = haar_idwt2(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn level_shapes_halve() {
        let p = haar_dwt2(&ImageTensor::zeros(32, 16, 3), 3).unwrap();
        for l in 1..=3 {
            assert_eq!(p.level(l).hh.shape(), (32 >> l, 16 >> l, 3));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let img = ImageTensor::zeros(12, 16, 1);
        assert!(matches!(haar_dwt2(&img, 0), Err(Error::Argument(_))));
        match haar_dwt2(&img, 3) {
            Err(Error::Shape(msg)) => assert!(msg.contains("height"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let img = ImageTensor::zeros(16, 12, 1);
        match haar_dwt2(&img, 3) {
            Err(Error::Shape(msg)) => assert!(msg.contains("width"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_pyramid_is_rejected() {
        let mut p = haar_dwt2(&random_image(8, 8, 1, 1), 2).unwrap();
        p.levels_mut()[0].hl = ImageTensor::zeros(2, 2, 1);
        assert!(matches!(haar_idwt2(&p), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_version_matches_array_version() {
        let img = random_image(16, 8, 3, 3);
        let p = haar_dwt2(&img, 2).unwrap();
        let t = stack_nchw(std::slice::from_ref(&img), DType::F32).unwrap();
        let bands = haar_dwt2_tensor(&t, 2).unwrap();
        for (l, tb) in bands.iter().enumerate() {
            let lvl = p.level(l + 1);
            for (arr, ten) in [&lvl.ll, &lvl.lh, &lvl.hl, &lvl.hh].iter().zip(tb) {
                let got = &crate::image::unstack_nchw(ten).unwrap()[0];
                assert!(got.max_abs_diff(arr) < 1e-6);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn perfect_reconstruction(seed in any::<u64>(), levels in 1usize..=3, c in 1usize..=3) {
            let img = random_image(16, 24, c, seed);
            let back = haar_idwt2(&haar_dwt2(&img, levels).unwrap()).unwrap();
            prop_assert!(back.max_abs_diff(&img) <= 1e-5);
        }

        #[test]
        fn energy_is_conserved(seed in any::<u64>(), levels in 1usize..=3) {
            let img = random_image(16, 16, 3, seed);
            let e = subband_energy(&haar_dwt2(&img, levels).unwrap());
            let direct = img.sum_sq();
            prop_assert!((e - direct).abs() <= 1e-5 * direct);
        }

        #[test]
        fn transform_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let x = random_image(8, 8, 2, seed);
            let y = random_image(8, 8, 2, seed.wrapping_add(1));
            let mix = ImageTensor::from_fn(8, 8, 2, |i, j, c| a * x.get(i, j, c) + b * y.get(i, j, c));
            let (px, py, pm) = (haar_dwt2(&x, 2).unwrap(), haar_dwt2(&y, 2).unwrap(), haar_dwt2(&mix, 2).unwrap());
            for l in 1..=2 {
                let bands = |p: &SubbandPyramid| {
                    let lv = p.level(l);
                    [lv.ll.clone(), lv.lh.clone(), lv.hl.clone(), lv.hh.clone()]
                };
                for ((bx, by), bm) in bands(&px).iter().zip(bands(&py).iter()).zip(bands(&pm).iter()) {
                    for ((vx, vy), vm) in bx.data().iter().zip(by.data()).zip(bm.data()) {
                        prop_assert!((a * vx + b * vy - vm).abs() <= 1e-5);
                    }
                }
            }
        }
    }
}

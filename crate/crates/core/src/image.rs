//! Raster type shared by every pipeline stage.
//!
//! Images are stored channel-last (`H x W x C`). Network code works on
//! batched `N x C x H x W` tensors; [`stack_nchw`] and [`unstack_nchw`]
//! convert between the two layouts.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// `H x W x C` raster of `f32` intensities.
///
/// Network-facing images live in `[-1, 1]`; the type itself does not enforce
/// a range so that wavelet subbands and intermediate rasters can reuse it.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::shape(format!(
                "image dimensions must be positive, got ({height}, {width}, {channels})"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "buffer of {} values does not match ({height}, {width}, {channels})",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(H, W, C)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Mean of one channel, accumulated in `f64`.
    pub fn channel_mean(&self, channel: usize) -> f64 {
        let n = (self.height * self.width) as f64;
        self.data
            .iter()
            .skip(channel)
            .step_by(self.channels)
            .map(|&v| v as f64)
            .sum::<f64>()
            / n
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    fn to_rgb32f(&self) -> Result<ImageBuffer<Rgb<f32>, Vec<f32>>> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "expected a 3-channel image, got {} channels",
                self.channels
            )));
        }
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::shape("raster buffer does not match its dimensions"))
    }

    /// Crops the window at `(top, left)` of size `(h, w)` and resamples it
    /// bilinearly to `(out_h, out_w)`. RGB only.
    pub fn crop_resize(
        &self,
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "crop window ({top}, {left}, {h}, {w}) outside {:?}",
                self.shape()
            )));
        }
        let buf = self.to_rgb32f()?;
        let crop = image::imageops::crop_imm(&buf, left as u32, top as u32, w as u32, h as u32)
            .to_image();
        let resized = if (h, w) == (out_h, out_w) {
            crop
        } else {
            image::imageops::resize(&crop, out_w as u32, out_h as u32, FilterType::Triangle)
        };
        ImageTensor::new(out_h, out_w, 3, resized.into_raw())
    }

    /// Converts a `[-1, 1]` raster to 8-bit RGB (values are clamped).
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::shape(format!(
                "expected a 3-channel image, got {} channels",
                self.channels
            )));
        }
        let bytes = self.data.iter().map(|&v| to_byte(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::shape("raster buffer does not match its dimensions"))
    }

    /// Maps 8-bit RGB into `[-1, 1]`.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| b as f32 / 127.5 - 1.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let rgb = self.to_rgb8()?;
        rgb.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

#[inline]
pub(crate) fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Stacks equally shaped images into an `N x C x H x W` tensor.
pub fn stack_nchw(images: &[ImageTensor], dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::arg("cannot stack an empty image list"))?;
    let (h, w, c) = first.shape();
    let mut buf: Vec<f32> = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        first.ensure_same_shape(img, "stacked images differ in shape")?;
        for ch in 0..c {
            buf.extend(img.data.iter().skip(ch).step_by(c));
        }
    }
    let t = Tensor::from_vec(buf, (images.len(), c, h, w), &Device::Cpu)?;
    Ok(if dtype == DType::F32 {
        t
    } else {
        t.to_dtype(dtype)?
    })
}

/// Splits an `N x C x H x W` tensor back into channel-last images.
pub fn unstack_nchw(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = t.dims4()?;
    let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..n)
        .map(|i| {
            let base = i * c * plane;
            ImageTensor::from_fn(h, w, c, |y, x, ch| flat[base + ch * plane + y * w + x])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_buffer() {
        assert!(ImageTensor::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageTensor::new(0, 2, 3, vec![]).is_err());
    }

    #[test]
    fn nchw_round_trip() {
        let a = ImageTensor::from_fn(3, 4, 3, |y, x, c| (y * 100 + x * 10 + c) as f32);
        let b = a.map(|v| -v);
        let t = stack_nchw(&[a.clone(), b.clone()], DType::F32).unwrap();
        assert_eq!(t.dims(), &[2, 3, 3, 4]);
        let back = unstack_nchw(&t).unwrap();
        assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn byte_mapping_hits_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(5.0), 255);
    }

    #[test]
    fn flip_is_an_involution() {
        let a = ImageTensor::from_fn(2, 5, 3, |y, x, c| (y * 7 + x * 3 + c) as f32);
        assert_eq!(a.flip_horizontal().flip_horizontal(), a);
        assert_eq!(a.flip_horizontal().get(1, 0, 2), a.get(1, 4, 2));
    }

    #[test]
    fn identity_crop_resize_is_exact() {
        let a = ImageTensor::from_fn(8, 8, 3, |y, x, c| (y as f32 - x as f32) * 0.1 + c as f32);
        let b = a.crop_resize(0, 0, 8, 8, 8, 8).unwrap();
        assert_eq!(a, b);
        let c = a.crop_resize(1, 2, 6, 6, 8, 8).unwrap();
        assert_eq!(c.shape(), (8, 8, 3));
    }
}

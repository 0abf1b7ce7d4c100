//! Pure image primitives shared by the loss functions and the metric suite:
//! BT.601 color transforms, Sobel gradients, SSIM, luma conversion and
//! histogramming. Everything here operates on immutable [`Image`] values and
//! is safe to call from any number of threads.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Channel layout of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    Rgb3,
    Gray1,
}

/// H x W x C float image with values in `[0, 1]`.
///
/// `C` is 3 (RGB, or the Y/Cb/Cr planes produced by [`rgb_to_ycbcr`]) or 1
/// (grayscale / infrared).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    /// Validates shape, finiteness and the `[0, 1]` range.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::InvalidImage(format!("empty image {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::ChannelMismatch {
                expected: "1 or 3",
                got: c,
            });
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
            }
        }
        Ok(Self { data })
    }

    /// Clamps every value into `[0, 1]` (NaN maps to 0) and wraps the result.
    pub fn clamped(mut data: Array3<f32>) -> Result<Self> {
        data.mapv_inplace(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self::new(data)
    }

    pub fn constant(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> Channels {
        if self.data.dim().2 == 3 {
            Channels::Rgb3
        } else {
            Channels::Gray1
        }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Luma plane as `f64`, used by the metric suite.
    pub(crate) fn luma_f64(&self) -> Array2<f64> {
        let (h, w, _) = self.data.dim();
        let mut out = Array2::zeros((h, w));
        match self.channels() {
            Channels::Gray1 => {
                for y in 0..h {
                    for x in 0..w {
                        out[[y, x]] = self.data[[y, x, 0]] as f64;
                    }
                }
            }
            Channels::Rgb3 => {
                for y in 0..h {
                    for x in 0..w {
                        let r = self.data[[y, x, 0]] as f64;
                        let g = self.data[[y, x, 1]] as f64;
                        let b = self.data[[y, x, 2]] as f64;
                        out[[y, x]] = YCBCR_FWD[0][0] * r + YCBCR_FWD[0][1] * g + YCBCR_FWD[0][2] * b;
                    }
                }
            }
        }
        out
    }
}

/// Horizontal and vertical Sobel responses, same spatial shape as the source.
#[derive(Debug, Clone)]
pub struct GradientPair {
    pub gx: Array2<f32>,
    pub gy: Array2<f32>,
}

/// BT.601 full-range RGB -> YCbCr matrix; the chroma rows already include the
/// +0.5 offset applied separately.
pub const YCBCR_FWD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

/// Inverse transform: R/G/B from (Y, Cb - 0.5, Cr - 0.5).
pub const YCBCR_INV: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136, -0.714_136],
    [1.0, 1.772, 0.0],
];

/// BT.601 full-range RGB -> YCbCr. Output planes are (Y, Cb, Cr), chroma
/// offset by +0.5 so the result stays inside `[0, 1]`.
pub fn rgb_to_ycbcr(img: &Image) -> Result<Image> {
    if img.channels() != Channels::Rgb3 {
        return Err(Error::ChannelMismatch {
            expected: "3 (RGB)",
            got: 1,
        });
    }
    let (h, w, _) = img.data.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let r = img.data[[y, x, 0]] as f64;
            let g = img.data[[y, x, 1]] as f64;
            let b = img.data[[y, x, 2]] as f64;
            for (k, row) in YCBCR_FWD.iter().enumerate() {
                let offset = if k == 0 { 0.0 } else { 0.5 };
                let v = row[0] * r + row[1] * g + row[2] * b + offset;
                out[[y, x, k]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(out)
}

/// Exact algebraic inverse of [`rgb_to_ycbcr`], clamped to `[0, 1]`.
pub fn ycbcr_to_rgb(img: &Image) -> Result<Image> {
    if img.channels() != Channels::Rgb3 {
        return Err(Error::ChannelMismatch {
            expected: "3 (YCbCr)",
            got: 1,
        });
    }
    let (h, w, _) = img.data.dim();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let yy = img.data[[y, x, 0]] as f64;
            let cb = img.data[[y, x, 1]] as f64 - 0.5;
            let cr = img.data[[y, x, 2]] as f64 - 0.5;
            for (k, row) in YCBCR_INV.iter().enumerate() {
                let v = row[0] * yy + row[1] * cb + row[2] * cr;
                out[[y, x, k]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image::new(out)
}

/// RGB -> BT.601 luma; grayscale passes through unchanged.
pub fn luma(img: &Image) -> Image {
    match img.channels() {
        Channels::Gray1 => img.clone(),
        Channels::Rgb3 => {
            let (h, w, _) = img.data.dim();
            let mut out = Array3::zeros((h, w, 1));
            let y64 = img.luma_f64();
            for y in 0..h {
                for x in 0..w {
                    out[[y, x, 0]] = y64[[y, x]] as f32;
                }
            }
            Image { data: out }
        }
    }
}

/// Mirror index for reflect padding (no edge duplication); single-element
/// axes fall back to clamping.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

pub(crate) fn sobel_f64(src: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let (h, w) = src.dim();
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let sy_idx = reflect_index(y as isize + dy, h);
                    let sx_idx = reflect_index(x as isize + dx, w);
                    let v = src[[sy_idx, sx_idx]];
                    sx += KX[(dy + 1) as usize][(dx + 1) as usize] * v;
                    sy += KY[(dy + 1) as usize][(dx + 1) as usize] * v;
                }
            }
            gx[[y, x]] = sx;
            gy[[y, x]] = sy;
        }
    }
    (gx, gy)
}

/// 3x3 Sobel responses of a grayscale image, reflect-padded borders.
pub fn sobel(img: &Image) -> Result<GradientPair> {
    if img.channels() != Channels::Gray1 {
        return Err(Error::ChannelMismatch {
            expected: "1 (grayscale)",
            got: 3,
        });
    }
    let (gx, gy) = sobel_f64(&img.luma_f64());
    Ok(GradientPair {
        gx: gx.mapv(|v| v as f32),
        gy: gy.mapv(|v| v as f32),
    })
}

pub(crate) fn gaussian_kernel1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as isize - 1) / 2;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable filtering with reflect padding.
pub(crate) fn filter_reflect(src: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = src.dim();
    let half = (kernel.len() as isize - 1) / 2;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let xi = reflect_index(x as isize + j as isize - half, w);
                acc += k * src[[y, xi]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, &k) in kernel.iter().enumerate() {
                let yi = reflect_index(y as isize + j as isize - half, h);
                acc += k * tmp[[yi, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

pub(crate) const SSIM_WINDOW: usize = 11;
pub(crate) const SSIM_SIGMA: f64 = 1.5;
pub(crate) const SSIM_C1: f64 = 0.01 * 0.01;
pub(crate) const SSIM_C2: f64 = 0.03 * 0.03;

pub(crate) fn ssim_f64(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let win = gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = filter_reflect(a, &win);
    let mu_b = filter_reflect(b, &win);
    let aa = filter_reflect(&(a * a), &win);
    let bb = filter_reflect(&(b * b), &win);
    let ab = filter_reflect(&(a * b), &win);
    let (h, w) = a.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let ma = mu_a[[y, x]];
            let mb = mu_b[[y, x]];
            let va = aa[[y, x]] - ma * ma;
            let vb = bb[[y, x]] - mb * mb;
            let vab = ab[[y, x]] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
        }
    }
    total / (h * w) as f64
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2 on the `[0, 1]` range, reflect-padded borders.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.channels() != Channels::Gray1 || b.channels() != Channels::Gray1 {
        return Err(Error::ChannelMismatch {
            expected: "1 (grayscale)",
            got: 3,
        });
    }
    if a.data.dim() != b.data.dim() {
        return Err(Error::shape_mismatch(a.data.dim(), b.data.dim()));
    }
    Ok(ssim_f64(&a.luma_f64(), &b.luma_f64()))
}

/// 256-bin histogram; bin k covers `[k/256, (k+1)/256)` with the last bin
/// closed above, so counts always sum to H * W.
pub fn histogram256(img: &Image) -> Result<[u64; 256]> {
    if img.channels() != Channels::Gray1 {
        return Err(Error::ChannelMismatch {
            expected: "1 (grayscale)",
            got: 3,
        });
    }
    let mut bins = [0u64; 256];
    for &v in img.data.iter() {
        bins[bin256(v)] += 1;
    }
    Ok(bins)
}

pub(crate) fn bin256(v: f32) -> usize {
    ((v as f64 * 256.0).floor() as usize).min(255)
}

/// Decodes an 8-bit PNG or JPEG, mapping samples to `[0, 1]` by v/255.
/// Gray inputs load as single-channel; everything else as RGB.
pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    use image::DynamicImage::*;
    match &dynimg {
        ImageLuma16(_) | ImageLumaA16(_) | ImageRgb16(_) | ImageRgba16(_) | ImageRgb32F(_)
        | ImageRgba32F(_) => {
            return Err(Error::InvalidImage(format!(
                "{}: only 8-bit images are supported",
                path.display()
            )))
        }
        _ => {}
    }
    match &dynimg {
        ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let mut data = Array3::zeros((h, w, 1));
            for (x, y, p) in g.enumerate_pixels() {
                data[[y as usize, x as usize, 0]] = p.0[0] as f32 / 255.0;
            }
            Image::new(data)
        }
        _ => {
            let rgb = dynimg.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut data = Array3::zeros((h, w, 3));
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[[y as usize, x as usize, c]] = p.0[c] as f32 / 255.0;
                }
            }
            Image::new(data)
        }
    }
}

/// Encodes to PNG or JPEG (by extension), rounding half-up after clamping.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w, c) = img.data.dim();
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8;
    if c == 1 {
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            p.0[0] = quant(img.data[[y as usize, x as usize, 0]]);
        }
        buf.save(path)?;
    } else {
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, p) in buf.enumerate_pixels_mut() {
            for ch in 0..3 {
                p.0[ch] = quant(img.data[[y as usize, x as usize, ch]]);
            }
        }
        buf.save(path)?;
    }
    Ok(())
}

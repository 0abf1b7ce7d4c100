//! Tensor-side image primitives mirroring [`crate::imgmath`] on
//! (B, C, H, W) tensors: reflect padding, luma/chroma extraction, Sobel
//! responses, Gaussian blur and SSIM. Everything here is differentiable and
//! dtype-generic (f32 for training, f64 for gradient checks).

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::imgmath::{self, Image};

pub fn image_to_tensor(img: &Image, dev: &Device, dtype: DType) -> Result<Tensor> {
    batch_to_tensor(std::slice::from_ref(img), dev, dtype)
}

/// Stacks images of identical shape into a (B, C, H, W) tensor.
pub fn batch_to_tensor(imgs: &[Image], dev: &Device, dtype: DType) -> Result<Tensor> {
    let (h, w, c) = imgs[0].data().dim();
    let mut buf = Vec::with_capacity(imgs.len() * c * h * w);
    for img in imgs {
        if img.data().dim() != (h, w, c) {
            return Err(Error::shape_mismatch((h, w, c), img.data().dim()));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    buf.push(img.data()[[y, x, ch]]);
                }
            }
        }
    }
    let t = Tensor::from_vec(buf, (imgs.len(), c, h, w), dev)?;
    Ok(t.to_dtype(dtype)?)
}

/// Converts a (1, C, H, W) or (C, H, W) tensor back into a clamped [`Image`].
pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
    let t = match t.dims() {
        [1, _, _, _] => t.squeeze(0)?,
        [_, _, _] => t.clone(),
        dims => {
            return Err(Error::InvalidImage(format!(
                "cannot convert tensor of shape {dims:?} to an image"
            )))
        }
    };
    let (c, h, w) = t.dims3()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut data = ndarray::Array3::zeros((h, w, c));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[[y, x, ch]] = flat[ch * h * w + y * w + x];
            }
        }
    }
    Image::clamped(data)
}

fn reflect_index_vec(n: usize, before: usize, after: usize) -> Vec<u32> {
    (0..before + n + after)
        .map(|i| imgmath::reflect_index(i as isize - before as isize, n) as u32)
        .collect()
}

/// Reflect padding (no edge duplication) on the last two dims.
pub fn reflect_pad(t: &Tensor, left: usize, right: usize, top: usize, bottom: usize) -> Result<Tensor> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let dev = t.device();
    let mut out = t.clone();
    if top > 0 || bottom > 0 {
        let idx = Tensor::from_vec(
            reflect_index_vec(h, top, bottom),
            top + h + bottom,
            dev,
        )?;
        out = out.index_select(&idx, dims.len() - 2)?;
    }
    if left > 0 || right > 0 {
        let idx = Tensor::from_vec(
            reflect_index_vec(w, left, right),
            left + w + right,
            dev,
        )?;
        out = out.index_select(&idx, dims.len() - 1)?;
    }
    Ok(out.contiguous()?)
}

/// BT.601 luma of an RGB batch; single-channel batches pass through.
pub fn luma(t: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = t.dims4()?;
    match c {
        1 => Ok(t.clone()),
        3 => {
            let r = t.narrow(1, 0, 1)?;
            let g = t.narrow(1, 1, 1)?;
            let b = t.narrow(1, 2, 1)?;
            Ok(((r * 0.299)? + (g * 0.587)? + (b * 0.114)?)?)
        }
        got => Err(Error::ChannelMismatch {
            expected: "1 or 3",
            got,
        }),
    }
}

/// BT.601 chroma planes (Cb, Cr) of an RGB batch, offset by +0.5.
pub fn chroma(t: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = t.dims4()?;
    if c != 3 {
        return Err(Error::ChannelMismatch {
            expected: "3 (RGB)",
            got: c,
        });
    }
    let r = t.narrow(1, 0, 1)?;
    let g = t.narrow(1, 1, 1)?;
    let b = t.narrow(1, 2, 1)?;
    let cb = (((r.affine(-0.168_736, 0.0)? + g.affine(-0.331_264, 0.0)?)? + (&b * 0.5)?)?
        + 0.5)?;
    let cr = (((&r * 0.5)? + g.affine(-0.418_688, 0.0)?)? + b.affine(-0.081_312, 0.5)?)?;
    Ok(Tensor::cat(&[cb, cr], 1)?)
}

fn kernel2d(vals: &[f64], kh: usize, kw: usize, t: &Tensor) -> Result<Tensor> {
    let k = Tensor::from_vec(vals.to_vec(), (1, 1, kh, kw), t.device())?;
    Ok(k.to_dtype(t.dtype())?)
}

/// 3x3 Sobel responses of a single-channel batch, reflect-padded.
pub fn sobel_xy(t: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c, _, _) = t.dims4()?;
    if c != 1 {
        return Err(Error::ChannelMismatch {
            expected: "1 (grayscale)",
            got: c,
        });
    }
    let kx = kernel2d(
        &[-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        3,
        3,
        t,
    )?;
    let ky = kernel2d(
        &[-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        3,
        3,
        t,
    )?;
    let padded = reflect_pad(t, 1, 1, 1, 1)?;
    let gx = padded.conv2d(&kx, 0, 1, 1, 1)?;
    let gy = padded.conv2d(&ky, 0, 1, 1, 1)?;
    Ok((gx, gy))
}

/// Depthwise separable Gaussian blur with reflect padding.
pub fn gaussian_blur(t: &Tensor, size: usize, sigma: f64) -> Result<Tensor> {
    let (_, c, _, _) = t.dims4()?;
    let k1 = imgmath::gaussian_kernel1d(size, sigma);
    let half = size / 2;
    let kh = Tensor::from_vec(k1.clone(), (1, 1, 1, size), t.device())?
        .to_dtype(t.dtype())?
        .repeat((c, 1, 1, 1))?;
    let kv = Tensor::from_vec(k1, (1, 1, size, 1), t.device())?
        .to_dtype(t.dtype())?
        .repeat((c, 1, 1, 1))?;
    let x = reflect_pad(t, half, half, 0, 0)?.conv2d(&kh, 0, 1, 1, c)?;
    let x = reflect_pad(&x, 0, 0, half, half)?.conv2d(&kv, 0, 1, 1, c)?;
    Ok(x)
}

/// Mean SSIM over a single-channel batch; same definition as
/// [`imgmath::ssim`] (11x11 Gaussian window, sigma 1.5, C1 = 0.01^2,
/// C2 = 0.03^2, reflect padding). Returns a scalar tensor.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape_mismatch(a.dims(), b.dims()));
    }
    let blur = |x: &Tensor| gaussian_blur(x, imgmath::SSIM_WINDOW, imgmath::SSIM_SIGMA);
    let mu_a = blur(a)?;
    let mu_b = blur(b)?;
    let sigma_a = (blur(&a.sqr()?)? - mu_a.sqr()?)?;
    let sigma_b = (blur(&b.sqr()?)? - mu_b.sqr()?)?;
    let sigma_ab = (blur(&(a * b)?)? - (&mu_a * &mu_b)?)?;
    let c1 = imgmath::SSIM_C1;
    let c2 = imgmath::SSIM_C2;
    let num = ((((&mu_a * &mu_b)? * 2.0)? + c1)? * ((sigma_ab * 2.0)? + c2)?)?;
    let den = (((mu_a.sqr()? + mu_b.sqr()?)? + c1)? * ((sigma_a + sigma_b)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub target_size: usize,
    /// Fraction of rows removed from the top before resizing.
    pub crop_top_fraction: f64,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions { target_size: 64, crop_top_fraction: 0.0, channels: 1 }
    }
}

pub fn preprocess_file(path: impl AsRef<Path>, opts: &PreprocessOptions) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    preprocess_named(&bytes, opts, &path.display().to_string())
}

/// Decodes an 8-bit raster, removes the top `crop_top_fraction` of rows,
/// resizes bilinearly to `target_size` square and scales to `[0, 1]`.
/// Returns `[channels, target_size, target_size]`.
pub fn preprocess(bytes: &[u8], opts: &PreprocessOptions) -> Result<Tensor> {
    preprocess_named(bytes, opts, "<memory>")
}

fn preprocess_named(bytes: &[u8], opts: &PreprocessOptions, name: &str) -> Result<Tensor> {
    if !(0.0..1.0).contains(&opts.crop_top_fraction) {
        return Err(DataError::Invalid(format!(
            "crop_top_fraction {} not in [0, 1)",
            opts.crop_top_fraction
        )));
    }
    if opts.target_size == 0 {
        return Err(DataError::Invalid("target_size must be positive".into()));
    }
    let img = image::load_from_memory(bytes)
        .map_err(|e| DataError::Image { path: name.to_string(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let planes: Vec<Vec<f32>> = match opts.channels {
        1 => vec![img.to_luma8().into_raw().into_iter().map(f32::from).collect()],
        3 => {
            let rgb = img.to_rgb8().into_raw();
            (0..3).map(|c| rgb.iter().skip(c).step_by(3).map(|&v| f32::from(v)).collect()).collect()
        }
        n => return Err(DataError::Invalid(format!("unsupported channel count {n}"))),
    };
    let skip = ((opts.crop_top_fraction * h as f64).floor() as usize).min(h - 1);
    let kept = h - skip;
    let s = opts.target_size;
    let mut data = Vec::with_capacity(planes.len() * s * s);
    for plane in planes {
        let resized = resize_bilinear(&plane[skip * w..], kept, w, s, s);
        data.extend(resized.into_iter().map(|v| v / 255.0));
    }
    Ok(Tensor::new([opts.channels, s, s], data)?)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let coord = |o: usize, src_len: usize, dst_len: usize| -> (usize, usize, f32) {
        let scale = src_len as f64 / dst_len as f64;
        let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| coord(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

//! Grad-CAM saliency for conv-net encoders under the prototype head.

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::resize_bilinear;
use crate::encoder::{Archetype, Encoder, EncoderError};
use crate::eval::QueryPrediction;
use crate::head::{logits, Distance, HeadError, PrototypeSet};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error(
        "Grad-CAM needs convolutional feature maps; the frozen-embed encoder has none. \
         Train a conv-net encoder to produce saliency maps"
    )]
    NoConvMaps,
    #[error("target class {target} outside 0..{way}")]
    TargetOutOfRange { target: usize, way: usize },
    #[error("prototype dimension {got} does not match embedding dimension {expected}")]
    PrototypeDim { got: usize, expected: usize },
    #[error("saliency is {map_h}x{map_w} but the image is {img_h}x{img_w}")]
    SizeMismatch { map_h: usize, map_w: usize, img_h: usize, img_w: usize },
    #[error("alpha {0} not in [0, 1]")]
    Alpha(f64),
    #[error("non-finite gradient while computing saliency")]
    NonFinite,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = ExplainError> = std::result::Result<T, E>;

/// Non-negative class-activation map, normalised to a maximum of 1 unless it
/// is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Grid size of the last conv layer.
    pub source_size: (usize, usize),
    /// Upsampled size, equal to the input image.
    pub size: (usize, usize),
    /// Row-major values of the upsampled map.
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.size.1 + x]
    }

    /// Share of total saliency falling inside rows `ys` and columns `xs`.
    /// Zero for an all-zero map.
    pub fn mass_fraction(&self, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> f64 {
        let total: f64 = self.values.iter().map(|&v| v as f64).sum();
        if total == 0.0 {
            return 0.0;
        }
        let inside: f64 = ys.flat_map(|y| xs.clone().map(move |x| (y, x))).map(|(y, x)| self.get(y, x) as f64).sum();
        inside / total
    }
}

/// Divides by the maximum; an all-zero map is left as is.
pub fn normalize(values: &mut [f32]) {
    let max = values.iter().copied().fold(0.0, f32::max);
    if max > 0.0 {
        for v in values {
            *v /= max;
        }
    }
}

/// Gradient of `log p_target` with respect to the logits, divided by the
/// largest non-target probability.
///
/// Since `1 - p_t = sum_{j != t} p_j`, every component is a non-target `p_j`
/// (or their sum), so the ratios `exp(z_j - z_top)` stay representable even
/// when the softmax saturates and each `p_j` itself underflows. The positive
/// factor cancels in the max-normalised map.
pub fn score_direction(z: &[f32], target: usize) -> Vec<f32> {
    let Some(top) = z.iter().enumerate().filter(|&(j, _)| j != target).map(|(_, &v)| v as f64).reduce(f64::max) else {
        return vec![0.0; z.len()];
    };
    let mut c: Vec<f64> = z.iter().map(|&v| -(v as f64 - top).exp()).collect();
    c[target] = 0.0;
    c[target] = -c.iter().sum::<f64>();
    c.into_iter().map(|v| v as f32).collect()
}

/// Grad-CAM of `image: [channels, size, size]` for `target`.
///
/// The differentiated score is the log-probability of `target` under the
/// prototype classifier, with its gradient rescaled by [`score_direction`].
/// Channel weights are the spatial means of that gradient with respect to the
/// post-ReLU output of the last conv layer.
pub fn gradcam(
    encoder: &Encoder,
    image: &Tensor,
    target: usize,
    prototypes: &PrototypeSet,
    distance: Distance,
) -> Result<SaliencyMap> {
    if encoder.config.archetype != Archetype::ConvNet {
        return Err(ExplainError::NoConvMaps);
    }
    if target >= prototypes.way() {
        return Err(ExplainError::TargetOutOfRange { target, way: prototypes.way() });
    }
    if prototypes.dim() != encoder.config.embed_dim {
        return Err(ExplainError::PrototypeDim { got: prototypes.dim(), expected: encoder.config.embed_dim });
    }
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let mut g = Graph::<f32>::new();
    let bound = encoder.bind(&mut g);
    // The input is differentiable so every activation is on a gradient path,
    // even when all encoder parameters are frozen.
    let input = g.param(image.clone().reshape(shape)?);
    let fwd = encoder.forward(&mut g, &bound, input)?;
    let last = fwd.last_conv.ok_or(ExplainError::NoConvMaps)?;
    let protos = g.constant(Tensor::new([prototypes.way(), prototypes.dim()], prototypes.flat())?);
    let z = logits(&mut g, fwd.embedding, protos, distance)?;
    let coeffs = g.constant(Tensor::new([1, prototypes.way()], score_direction(g.value(z).data(), target))?);
    let weighted = g.mul(z, coeffs)?;
    let score = g.sum(weighted)?;
    match g.backward(score) {
        Ok(()) => {}
        Err(TensorError::NonFinite { .. }) => return Err(ExplainError::NonFinite),
        Err(e) => return Err(e.into()),
    }
    let acts = g.value(last);
    let (c, h, w) = (acts.shape()[1], acts.shape()[2], acts.shape()[3]);
    let zeros = Tensor::zeros(acts.shape().to_vec());
    let grads = g.grad(last).unwrap_or(&zeros);
    let hw = h * w;
    let mut cam = vec![0.0f32; hw];
    for ch in 0..c {
        let a = &acts.data()[ch * hw..(ch + 1) * hw];
        let d = &grads.data()[ch * hw..(ch + 1) * hw];
        let weight = d.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        for (m, &v) in cam.iter_mut().zip(a) {
            *m += (weight * v as f64) as f32;
        }
    }
    for m in &mut cam {
        *m = m.max(0.0);
    }
    let (out_h, out_w) = (image.shape()[1], image.shape()[2]);
    let mut values = resize_bilinear(&cam, h, w, out_h, out_w);
    for v in &mut values {
        *v = v.max(0.0);
    }
    normalize(&mut values);
    if values.iter().any(|v| !v.is_finite()) {
        return Err(ExplainError::NonFinite);
    }
    Ok(SaliencyMap { source_size: (h, w), size: (out_h, out_w), values })
}

/// Colour of saliency `m` in `[0, 1]`: a straight line from blue (cold) to red (hot).
pub fn ramp(m: f32) -> [f32; 3] {
    let m = m.clamp(0.0, 1.0);
    [255.0 * m, 0.0, 255.0 * (1.0 - m)]
}

/// Per-pixel `(1 - alpha) * gray + alpha * ramp(map)`, rounded to 8 bits.
pub fn overlay(image: &GrayImage, map: &SaliencyMap, alpha: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ExplainError::Alpha(alpha));
    }
    let (w, h) = (image.width() as usize, image.height() as usize);
    if map.size != (h, w) {
        return Err(ExplainError::SizeMismatch { map_h: map.size.0, map_w: map.size.1, img_h: h, img_w: w });
    }
    let a = alpha as f32;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = image.get_pixel(x, y)[0] as f32;
        let c = ramp(map.get(y as usize, x as usize));
        Rgb(c.map(|c| ((1.0 - a) * g + a * c).round().clamp(0.0, 255.0) as u8))
    }))
}

/// Converts a `[1, h, w]` tensor in `[0, 1]` to an 8-bit grayscale image.
pub fn to_gray(image: &Tensor) -> Result<GrayImage> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(TensorError::Shape { op: "to_gray", detail: format!("expected [1, h, w], got {s:?}") }.into());
    }
    let (h, w) = (s[1], s[2]);
    let bytes = image.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer length matches dimensions"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionTag {
    ConfidentCorrect,
    Misclassified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub prediction: QueryPrediction,
    pub tag: SelectionTag,
}

/// Correct predictions with `p(true) > threshold`, plus every misclassified
/// prediction, in input order.
pub fn select_high_confidence(predictions: &[QueryPrediction], threshold: f64) -> Vec<Selected> {
    predictions
        .iter()
        .filter_map(|p| {
            let tag = if !p.is_correct() {
                SelectionTag::Misclassified
            } else if p.p_true() > threshold {
                SelectionTag::ConfidentCorrect
            } else {
                return None;
            };
            Some(Selected { prediction: p.clone(), tag })
        })
        .collect()
}

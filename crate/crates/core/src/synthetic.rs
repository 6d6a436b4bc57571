//! Procedural datasets with known structure, used for convergence and
//! localisation checks.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, Result};
use crate::tensor::Tensor;

/// `way` isotropic Gaussian classes in `dim` dimensions. Class `k` is centred
/// at `k * separation` in every coordinate, so neighbouring class means differ
/// by `separation` per component.
pub fn gaussian_blobs(way: usize, per_class: usize, dim: usize, sigma: f64, separation: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    let mut samples = Vec::with_capacity(way * per_class);
    let mut labels = Vec::with_capacity(way * per_class);
    for k in 0..way {
        let centre = k as f64 * separation;
        for _ in 0..per_class {
            let v = (0..dim).map(|_| (centre + noise.sample(&mut rng)) as f32).collect();
            samples.push(Tensor::new([dim], v)?);
            labels.push(k);
        }
    }
    Dataset::new(samples, labels, way)
}

/// Texture classes loosely modelled on lung ultrasound artefacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    /// Evenly spaced bright rows (A-line-like).
    HorizontalStripes,
    /// A few bright columns running top to bottom (B-line-like).
    VerticalStreaks,
    /// Dark background with speckle only.
    Blank,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::HorizontalStripes, Texture::VerticalStreaks, Texture::Blank];
}

const SPECKLE: f64 = 0.1;

fn speckle(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let normal = Normal::new(0.2, SPECKLE).expect("valid");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

/// One `[1, size, size]` texture image, clamped to `[0, 1]`.
pub fn texture_image(kind: Texture, size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut px = speckle(rng, size * size);
    match kind {
        Texture::HorizontalStripes => {
            let period = rng.random_range(6..=10);
            let phase = rng.random_range(0..period);
            for y in (0..size).filter(|y| (y + phase) % period < 2) {
                for v in &mut px[y * size..(y + 1) * size] {
                    *v += 0.6;
                }
            }
        }
        Texture::VerticalStreaks => {
            let count = rng.random_range(2..=4);
            for _ in 0..count {
                let x0 = rng.random_range(0..size.saturating_sub(3).max(1));
                let width = rng.random_range(2..=3);
                for y in 0..size {
                    for x in x0..(x0 + width).min(size) {
                        px[y * size + x] += 0.6;
                    }
                }
            }
        }
        Texture::Blank => {}
    }
    for v in &mut px {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new([1, size, size], px).expect("size > 0")
}

/// Three-class texture dataset: stripes, streaks, blank.
pub fn textures(per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(3 * per_class);
    let mut labels = Vec::with_capacity(3 * per_class);
    for (k, kind) in Texture::ALL.into_iter().enumerate() {
        for _ in 0..per_class {
            samples.push(texture_image(kind, size, &mut rng));
            labels.push(k);
        }
    }
    Dataset::new(samples, labels, 3)
}

const DISTRACTORS: usize = 2;

/// Two-class task whose only evidence is a stripe patch in the top-left
/// quadrant: horizontal stripes for class 0, vertical for class 1. The rest of
/// the image is speckle with a few random bright blobs as distractors.
pub fn planted_quadrant(per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size / 2;
    let mut samples = Vec::with_capacity(2 * per_class);
    let mut labels = Vec::with_capacity(2 * per_class);
    for class in 0..2 {
        for _ in 0..per_class {
            let mut px = speckle(&mut rng, size * size);
            let phase = rng.random_range(0..4);
            for y in 0..half {
                for x in 0..half {
                    let along = if class == 0 { y } else { x };
                    if (along + phase) % 4 < 2 {
                        px[y * size + x] += 0.6;
                    }
                }
            }
            for _ in 0..DISTRACTORS {
                let (cy, cx) = loop {
                    let c = (rng.random_range(0..size - 3), rng.random_range(0..size - 3));
                    if c.0 >= half || c.1 >= half {
                        break c;
                    }
                };
                for y in cy..cy + 3 {
                    for x in cx..cx + 3 {
                        px[y * size + x] += 0.5;
                    }
                }
            }
            for v in &mut px {
                *v = v.clamp(0.0, 1.0);
            }
            samples.push(Tensor::new([1, size, size], px)?);
            labels.push(class);
        }
    }
    Dataset::new(samples, labels, 2)
}

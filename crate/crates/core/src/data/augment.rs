use serde::{Deserialize, Serialize};

use super::{DataError, Result, SampleRecord};
use crate::tensor::Tensor;

/// Clockwise rotation by a multiple of 90 degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn degrees(self) -> u32 {
        90 * self.quarter_turns() as u32
    }
}

/// A manifest record paired with the rotation to apply when it is loaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedRecord {
    pub record: SampleRecord,
    pub rotation: Rotation,
}

/// Rotates the two trailing (square) axes of `image` clockwise.
pub fn rotate(image: &Tensor, rotation: Rotation) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(DataError::Invalid(format!("image needs at least 2 axes, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h != w {
        return Err(DataError::NonSquare { height: h, width: w });
    }
    let s = h;
    let mut out = image.clone();
    let turns = rotation.quarter_turns();
    if turns == 0 {
        return Ok(out);
    }
    for (src, dst) in image.data().chunks(s * s).zip(out.data_mut().chunks_mut(s * s)) {
        for y in 0..s {
            for x in 0..s {
                let (sy, sx) = match turns {
                    1 => (s - 1 - x, y),
                    2 => (s - 1 - y, s - 1 - x),
                    _ => (x, s - 1 - y),
                };
                dst[y * s + x] = src[sy * s + sx];
            }
        }
    }
    Ok(out)
}

/// Each image followed by its 90, 180 and 270 degree rotations.
pub fn augment_rotations(images: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(images.len() * 4);
    for img in images {
        for r in Rotation::ALL {
            out.push(rotate(img, r)?);
        }
    }
    Ok(out)
}

/// Record-level form of [`augment_rotations`]: the rotation is applied lazily
/// when the image is read.
pub fn augment_records(records: &[SampleRecord]) -> Vec<AugmentedRecord> {
    records
        .iter()
        .flat_map(|r| Rotation::ALL.into_iter().map(move |rotation| AugmentedRecord { record: r.clone(), rotation }))
        .collect()
}

//! Turns prepared manifests into in-memory datasets.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use protonet_core::data::{
    augment_records, parse_manifest, preprocess_file, rotate, AugmentedRecord, DataError, Dataset, Manifest,
    PreprocessOptions, Rotation,
};
use protonet_core::encoder::Archetype;
use protonet_core::Tensor;

use crate::config::RunConfig;

pub const TRAIN_MANIFEST: &str = "train.csv";
pub const TEST_MANIFEST: &str = "test.csv";

fn read_manifest(path: &Path, known: Option<&[String]>) -> Result<Manifest> {
    let file = std::fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
        .with_context(|| "run `prepare` first")?;
    Ok(parse_manifest(file, known).with_context(|| format!("reading {}", path.display()))?)
}

/// Prepared train and test manifests. Test class ids follow the train split.
pub fn load_splits(out: &Path) -> Result<(Manifest, Manifest)> {
    let train = read_manifest(&out.join(TRAIN_MANIFEST), None)?;
    let test = read_manifest(&out.join(TEST_MANIFEST), Some(&train.classes))?;
    Ok((train, test))
}

/// Reads a precomputed feature vector: floats separated by commas or whitespace.
pub fn read_features(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let values = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f32>()
                .map_err(|_| DataError::Invalid(format!("{}: `{s}` is not a number", path.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(DataError::Invalid(format!("{}: no feature values", path.display())).into());
    }
    Ok(Tensor::new([values.len()], values)?)
}

fn is_feature_file(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("txt" | "csv"))
}

fn load_one(item: &AugmentedRecord, opts: &PreprocessOptions, archetype: Archetype) -> Result<Tensor> {
    let path = PathBuf::from(&item.record.image_path);
    if archetype == Archetype::FrozenEmbed && is_feature_file(&path) {
        return read_features(&path);
    }
    let image = rotate(&preprocess_file(&path, opts)?, item.rotation)?;
    Ok(match archetype {
        Archetype::ConvNet => image,
        Archetype::FrozenEmbed => {
            let n = image.len();
            image.reshape([n])?
        }
    })
}

/// Loads every record, four rotations each when `augment` is set.
///
/// Conv-net samples are `[C, S, S]` images; frozen-embed samples are feature
/// vectors read from `.txt`/`.csv` files, or flattened images otherwise.
pub fn build_dataset(cfg: &RunConfig, manifest: &Manifest, augment: bool) -> Result<Dataset> {
    let opts = PreprocessOptions {
        target_size: cfg.data.target_size,
        crop_top_fraction: cfg.data.crop_top_fraction,
        channels: cfg.data.channels,
    };
    let archetype = cfg.encoder.archetype;
    let items: Vec<AugmentedRecord> = if augment {
        if archetype == Archetype::FrozenEmbed && manifest.records.iter().any(|r| is_feature_file(Path::new(&r.image_path))) {
            log::warn!("rotating precomputed feature files is undefined; augmentation applies to images only");
        }
        augment_records(&manifest.records)
            .into_iter()
            .filter(|a| {
                a.rotation == Rotation::R0
                    || !(archetype == Archetype::FrozenEmbed && is_feature_file(Path::new(&a.record.image_path)))
            })
            .collect()
    } else {
        manifest.records.iter().map(|r| AugmentedRecord { record: r.clone(), rotation: Rotation::R0 }).collect()
    };
    let mut samples = Vec::with_capacity(items.len());
    let mut labels = Vec::with_capacity(items.len());
    for item in &items {
        samples.push(load_one(item, &opts, archetype)?);
        labels.push(item.record.class_id);
    }
    Ok(Dataset::new(samples, labels, manifest.classes.len())?)
}

/// Feature length of a frozen-embed dataset (0 for images).
pub fn frozen_dim(cfg: &RunConfig, data: &Dataset) -> usize {
    match cfg.encoder.archetype {
        Archetype::FrozenEmbed => data.sample_shape().map_or(0, |s| s.iter().product()),
        Archetype::ConvNet => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn features_accept_commas_and_whitespace() {
        let dir = std::env::temp_dir().join(format!("protonet-features-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("f.txt");
        std::fs::write(&p, "1.5, 2\n-3 4e-1\n").unwrap();
        assert_eq!(read_features(&p).unwrap().data(), &[1.5, 2.0, -3.0, 0.4]);
        std::fs::write(&p, "1, x").unwrap();
        assert!(read_features(&p).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, Result, SampleRecord};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitPair {
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl SplitPair {
    pub fn video_ids(records: &[SampleRecord]) -> BTreeSet<&str> {
        records.iter().map(|r| r.video_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitOutcome {
    pub split: SplitPair,
    pub warnings: Vec<String>,
}

/// Assigns whole videos to train or test so that each class's frame count in
/// train approaches `train_fraction`.
///
/// A video belongs to the class holding most of its frames (lowest id on a
/// tie). Within a class, videos are visited largest first (seeded shuffle
/// breaks size ties) and each goes to the split furthest below its frame
/// target. A class with two or more videos always ends up in both splits; a
/// class with a single video goes entirely to train with a warning.
pub fn split_by_video(records: &[SampleRecord], train_fraction: f64, seed: u64) -> Result<SplitOutcome> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Invalid(format!("train_fraction {train_fraction} not in (0, 1)")));
    }

    // video -> per-class frame counts
    let mut videos: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in records {
        *videos.entry(&r.video_id).or_default().entry(r.class_id).or_default() += 1;
    }
    let mut by_class: BTreeMap<usize, Vec<(&str, usize)>> = BTreeMap::new();
    for (&video, counts) in &videos {
        let (&class, _) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .expect("video has frames");
        by_class.entry(class).or_default().push((video, counts.values().sum()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_videos = BTreeSet::new();
    let mut warnings = Vec::new();
    for (class, mut vids) in by_class {
        if vids.len() < 2 {
            let msg = format!("class {class} has a single video; all its frames go to train");
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        vids.shuffle(&mut rng);
        vids.sort_by(|a, b| b.1.cmp(&a.1));
        let total: usize = vids.iter().map(|v| v.1).sum();
        let train_target = train_fraction * total as f64;
        let test_target = total as f64 - train_target;
        let (mut train_n, mut test_n) = (0usize, 0usize);
        let mut train_v = Vec::new();
        let mut test_v = Vec::new();
        for (video, n) in vids {
            if test_target - test_n as f64 > train_target - train_n as f64 {
                test_n += n;
                test_v.push((video, n));
            } else {
                train_n += n;
                train_v.push((video, n));
            }
        }
        if test_v.is_empty() {
            // train_v holds every video, smallest last
            test_v.push(train_v.pop().expect("at least two videos"));
        }
        test_videos.extend(test_v.into_iter().map(|v| v.0));
    }

    let (test, train): (Vec<_>, Vec<_>) =
        records.iter().cloned().partition(|r| test_videos.contains(r.video_id.as_str()));
    Ok(SplitOutcome { split: SplitPair { train, test }, warnings })
}

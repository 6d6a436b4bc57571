use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};

/// Shape of a K-way N-shot task with M queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    /// `query` defaults to `shot`.
    pub fn new(way: usize, shot: usize) -> Self {
        EpisodeSpec { way, shot, query: shot }
    }

    pub fn per_class(&self) -> usize {
        self.shot + self.query
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Index into the backing [`Dataset`].
    pub index: usize,
    pub class_id: usize,
}

/// One sampled task. Support and query lists are class-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.class_id).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.class_id).collect()
    }

    /// Support indices followed by query indices.
    pub fn all_indices(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|i| i.index).collect()
    }
}

/// Deterministic source of independent random streams.
///
/// Stream `i` depends only on `(seed, i)`, so consumers that take disjoint
/// stream numbers draw reproducible, non-overlapping sequences regardless of
/// scheduling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedStream {
    seed: u64,
    next: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed, next: 0 }
    }

    pub fn stream(&self, i: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i);
        rng
    }

    pub fn next_rng(&mut self) -> ChaCha8Rng {
        let rng = self.stream(self.next);
        self.next += 1;
        rng
    }

    pub fn position(&self) -> u64 {
        self.next
    }
}

/// Draws `shot + query` distinct samples per class without replacement; the
/// first `shot` form the support set.
pub fn sample_episode(pools: &[Vec<usize>], spec: EpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Episode> {
    if spec.way == 0 || spec.shot == 0 || spec.query == 0 {
        return Err(DataError::Invalid(format!("degenerate episode spec {spec:?}")));
    }
    if pools.len() != spec.way {
        return Err(DataError::Invalid(format!(
            "episode wants {} classes but the split has {}",
            spec.way,
            pools.len()
        )));
    }
    let need = spec.per_class();
    if let Some((class, pool)) = pools.iter().enumerate().find(|(_, p)| p.len() < need) {
        return Err(DataError::InsufficientSamples { class, have: pool.len(), need });
    }
    let mut support = Vec::with_capacity(spec.way * spec.shot);
    let mut query = Vec::with_capacity(spec.way * spec.query);
    for (class_id, pool) in pools.iter().enumerate() {
        let picks = index::sample(rng, pool.len(), need);
        for (j, p) in picks.into_iter().enumerate() {
            let item = EpisodeItem { index: pool[p], class_id };
            if j < spec.shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode { way: spec.way, shot: spec.shot, query_per_class: spec.query, support, query })
}

/// Episode source over a dataset with a seeded stream per episode.
#[derive(Debug, Clone)]
pub struct EpisodeSampler {
    pools: Vec<Vec<usize>>,
    spec: EpisodeSpec,
    seeds: SeedStream,
}

impl EpisodeSampler {
    pub fn new(dataset: &Dataset, spec: EpisodeSpec, seed: u64) -> Result<Self> {
        let pools = dataset.class_pools();
        if pools.len() != spec.way {
            return Err(DataError::Invalid(format!(
                "{}-way episodes over a dataset with {} classes",
                spec.way,
                pools.len()
            )));
        }
        let need = spec.per_class();
        if let Some((class, pool)) = pools.iter().enumerate().find(|(_, p)| p.len() < need) {
            return Err(DataError::InsufficientSamples { class, have: pool.len(), need });
        }
        Ok(EpisodeSampler { pools, spec, seeds: SeedStream::new(seed) })
    }

    pub fn spec(&self) -> EpisodeSpec {
        self.spec
    }

    pub fn next_episode(&mut self) -> Result<Episode> {
        let mut rng = self.seeds.next_rng();
        sample_episode(&self.pools, self.spec, &mut rng)
    }
}

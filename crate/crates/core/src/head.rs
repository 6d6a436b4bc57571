//! Prototype head: class means in embedding space, distance softmax, and the
//! negative log-likelihood episode loss.
//!
//! Plain-vector functions ([`compute_prototypes`], [`classify`],
//! [`episode_loss`]) serve inference and reporting. [`prototypical_loss`]
//! builds the same computation on a [`Graph`] so it can be differentiated
//! back into the encoder.

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, TensorError, Var, PROB_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadError {
    #[error("class {0} has no support embeddings")]
    EmptyClass(usize),
    #[error("class id {id} outside 0..{way}")]
    ClassOutOfRange { id: usize, way: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("{0} distributions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("nothing to score")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = HeadError> = std::result::Result<T, E>;

/// Distance between a query embedding and a prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    /// `sum_i (v_i - q_i)^2`
    #[default]
    SquaredEuclidean,
    /// `sqrt(sum_i (v_i - q_i)^2)`
    Euclidean,
}

impl Distance {
    pub fn between(self, v: &[f32], q: &[f32]) -> Result<f32> {
        let d = sq_euclidean(v, q)?;
        Ok(match self {
            Distance::SquaredEuclidean => d,
            Distance::Euclidean => d.sqrt(),
        })
    }
}

/// One prototype per class, all of the same dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    prototypes: Vec<Vec<f32>>,
    dim: usize,
}

impl PrototypeSet {
    pub fn from_vectors(prototypes: Vec<Vec<f32>>) -> Result<Self> {
        let dim = prototypes.first().ok_or(HeadError::Empty)?.len();
        for p in &prototypes {
            if p.len() != dim {
                return Err(HeadError::Dim(p.len(), dim));
            }
        }
        Ok(PrototypeSet { prototypes, dim })
    }

    pub fn way(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, class: usize) -> Option<&[f32]> {
        self.prototypes.get(class).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        self.prototypes.iter().map(Vec::as_slice)
    }

    /// Row-major `[way, dim]` copy.
    pub fn flat(&self) -> Vec<f32> {
        self.prototypes.concat()
    }
}

/// Class probabilities for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub probabilities: Vec<f64>,
}

impl ClassDistribution {
    /// Softmax of `-distances` with a max shift.
    pub fn from_distances(distances: &[f64]) -> Self {
        let best = distances.iter().copied().fold(f64::INFINITY, f64::min);
        let weights: Vec<f64> = distances.iter().map(|&d| (best - d).exp()).collect();
        let total: f64 = weights.iter().sum();
        ClassDistribution { probabilities: weights.into_iter().map(|w| w / total).collect() }
    }

    /// Most probable class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = k;
            }
        }
        best
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probabilities[class]
    }
}

/// Mean of each class's support embeddings.
pub fn compute_prototypes<V: AsRef<[f32]>>(support: &[(V, usize)], way: usize) -> Result<PrototypeSet> {
    let dim = support.first().map(|(v, _)| v.as_ref().len()).ok_or(HeadError::EmptyClass(0))?;
    let mut sums = vec![vec![0.0f64; dim]; way];
    let mut counts = vec![0usize; way];
    for (v, class) in support {
        let v = v.as_ref();
        if *class >= way {
            return Err(HeadError::ClassOutOfRange { id: *class, way });
        }
        if v.len() != dim {
            return Err(HeadError::Dim(v.len(), dim));
        }
        counts[*class] += 1;
        for (acc, &x) in sums[*class].iter_mut().zip(v) {
            *acc += x as f64;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(HeadError::EmptyClass(empty));
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|x| (x / n as f64) as f32).collect())
        .collect();
    Ok(PrototypeSet { prototypes, dim })
}

pub fn sq_euclidean(v: &[f32], q: &[f32]) -> Result<f32> {
    if v.len() != q.len() {
        return Err(HeadError::Dim(v.len(), q.len()));
    }
    Ok(v.iter().zip(q).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

/// Distribution over classes and the predicted class for one query.
pub fn classify(
    query: &[f32],
    protos: &PrototypeSet,
    distance: Distance,
) -> Result<(ClassDistribution, usize)> {
    let distances = protos
        .iter()
        .map(|p| distance.between(p, query).map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    let dist = ClassDistribution::from_distances(&distances);
    let predicted = dist.argmax();
    Ok((dist, predicted))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Queries whose true-class probability fell below the clamp floor.
    pub clamped: usize,
}

/// Mean over queries of `-ln p(true class)`, with probabilities floored at 1e-12.
pub fn episode_loss(distributions: &[ClassDistribution], labels: &[usize]) -> Result<LossValue> {
    if distributions.len() != labels.len() {
        return Err(HeadError::LengthMismatch(distributions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(HeadError::Empty);
    }
    let floor = PROB_FLOOR;
    let mut clamped = 0;
    let mut total = 0.0;
    for (d, &y) in distributions.iter().zip(labels) {
        let way = d.probabilities.len();
        let p = *d.probabilities.get(y).ok_or(HeadError::ClassOutOfRange { id: y, way })?;
        if p < floor {
            clamped += 1;
        }
        total -= p.max(floor).ln();
    }
    Ok(LossValue { loss: total / labels.len() as f64, clamped })
}

/// Graph nodes produced by [`prototypical_loss`].
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `[way, dim]`
    pub prototypes: Var,
    /// `[queries, way]`
    pub log_probs: Var,
    /// Scalar mean negative log-likelihood.
    pub loss: Var,
}

/// Negative distances `[q, way]` of `queries: [q, dim]` to `prototypes: [way, dim]`.
pub fn logits<T: Scalar>(graph: &mut Graph<T>, queries: Var, prototypes: Var, distance: Distance) -> Result<Var> {
    let mut d = graph.sq_dist(queries, prototypes)?;
    if distance == Distance::Euclidean {
        d = graph.sqrt(d)?;
    }
    Ok(graph.neg(d)?)
}

/// Row log-probabilities of `queries: [q, dim]` against `prototypes: [way, dim]`.
pub fn log_probs<T: Scalar>(
    graph: &mut Graph<T>,
    queries: Var,
    prototypes: Var,
    distance: Distance,
) -> Result<Var> {
    let z = logits(graph, queries, prototypes, distance)?;
    Ok(graph.log_softmax(z)?)
}

/// Prototypes from `support`, then the loss of classifying `queries`.
pub fn prototypical_loss<T: Scalar>(
    graph: &mut Graph<T>,
    support: Var,
    support_labels: &[usize],
    queries: Var,
    query_labels: &[usize],
    way: usize,
    distance: Distance,
) -> Result<HeadOutput> {
    let prototypes = graph.group_mean(support, support_labels, way).map_err(|e| match e {
        TensorError::InvalidArgument { ref detail, .. } if detail.contains("no members") => {
            let class = (0..way).find(|c| !support_labels.contains(c)).unwrap_or(0);
            HeadError::EmptyClass(class)
        }
        other => other.into(),
    })?;
    let log_probs = log_probs(graph, queries, prototypes, distance)?;
    let loss = graph.nll(log_probs, query_labels)?;
    Ok(HeadOutput { prototypes, log_probs, loss })
}

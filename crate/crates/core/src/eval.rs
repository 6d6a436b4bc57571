//! Episodic evaluation, confusion-matrix metrics and the results table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, EpisodeSampler, EpisodeSpec};
use crate::encoder::{Encoder, EncoderError};
use crate::head::{classify, compute_prototypes, Distance, HeadError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("class id {id} outside 0..{way}")]
    ClassOutOfRange { id: usize, way: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Counts with rows indexed by true class and columns by predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    way: usize,
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(way: usize) -> Self {
        ConfusionMatrix { way, counts: vec![vec![0; way]; way] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let way = counts.len();
        if counts.iter().any(|r| r.len() != way) {
            return Err(EvalError::Config("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix { way, counts })
    }

    pub fn way(&self) -> usize {
        self.way
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for id in [truth, predicted] {
            if id >= self.way {
                return Err(EvalError::ClassOutOfRange { id, way: self.way });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.way).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn column_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

/// Accuracy plus per-class precision and recall; `None` marks an empty
/// denominator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
}

pub fn metrics_from_cm(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let precision = (0..cm.way).map(|k| ratio(cm.get(k, k), cm.column_sum(k))).collect();
    let recall = (0..cm.way).map(|k| ratio(cm.get(k, k), cm.row_sum(k))).collect();
    Ok(Metrics { accuracy: cm.trace() as f64 / total as f64, precision, recall })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub seed: u64,
    pub distance: Distance,
}

impl EvalConfig {
    pub const DEFAULT_EPISODES: usize = 200;

    pub fn new(spec: EpisodeSpec, seed: u64) -> Self {
        EvalConfig { spec, episodes: Self::DEFAULT_EPISODES, seed, distance: Distance::default() }
    }
}

/// Outcome for one query of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub episode: usize,
    /// Index into the evaluated dataset.
    pub index: usize,
    pub truth: usize,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

impl QueryPrediction {
    pub fn is_correct(&self) -> bool {
        self.truth == self.predicted
    }

    pub fn p_true(&self) -> f64 {
        self.probabilities[self.truth]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ways: usize,
    pub shots: usize,
    pub model: String,
    pub episodes: usize,
    pub accuracy: f64,
    pub class_names: Vec<String>,
    /// Class whose precision and recall appear in the table row.
    pub positive_class: usize,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(
        ways: usize,
        shots: usize,
        model: impl Into<String>,
        episodes: usize,
        class_names: Vec<String>,
        positive_class: usize,
        confusion: ConfusionMatrix,
    ) -> Result<Self> {
        let m = metrics_from_cm(&confusion)?;
        Ok(EvalReport {
            ways,
            shots,
            model: model.into(),
            episodes,
            accuracy: m.accuracy,
            class_names,
            positive_class,
            precision: m.precision,
            recall: m.recall,
            confusion,
        })
    }

    pub fn scenario(&self) -> String {
        format!("{}-way", self.ways)
    }

    pub fn positive_precision(&self) -> Option<f64> {
        self.precision.get(self.positive_class).copied().flatten()
    }

    pub fn positive_recall(&self) -> Option<f64> {
        self.recall.get(self.positive_class).copied().flatten()
    }

    /// Class indices with the positive class first, then the rest in order.
    pub fn class_order(&self) -> Vec<usize> {
        let mut order = vec![self.positive_class];
        order.extend((0..self.ways).filter(|&k| k != self.positive_class));
        order
    }
}

/// Runs `config.episodes` episodes over `data` without touching the encoder's
/// parameters and pools every query into one confusion matrix.
pub fn evaluate(
    encoder: &Encoder,
    data: &Dataset,
    config: &EvalConfig,
) -> Result<(ConfusionMatrix, Vec<QueryPrediction>)> {
    if config.episodes == 0 {
        return Err(EvalError::Config("episodes must be at least 1".into()));
    }
    let mut sampler = EpisodeSampler::new(data, config.spec, config.seed)?;
    let way = config.spec.way;
    let mut cm = ConfusionMatrix::new(way);
    let mut predictions = Vec::with_capacity(config.episodes * way * config.spec.query);
    for episode in 0..config.episodes {
        let ep = sampler.next_episode()?;
        let emb = encoder.embed(&data.batch(&ep.all_indices())?)?;
        let support: Vec<(&[f32], usize)> =
            ep.support.iter().enumerate().map(|(i, item)| (emb.row(i), item.class_id)).collect();
        let protos = compute_prototypes(&support, way)?;
        let offset = ep.support.len();
        for (j, item) in ep.query.iter().enumerate() {
            let (dist, predicted) = classify(emb.row(offset + j), &protos, config.distance)?;
            cm.accumulate(item.class_id, predicted)?;
            predictions.push(QueryPrediction {
                episode,
                index: item.index,
                truth: item.class_id,
                predicted,
                probabilities: dist.probabilities,
            });
        }
    }
    Ok((cm, predictions))
}

/// Rounds half-up to four places and prints exactly four decimals.
pub fn format_value(value: Option<f64>) -> String {
    match value {
        Some(v) => {
            let r = ((v * 1e4) + 0.5 + 1e-9).floor() / 1e4;
            format!("{r:.4}")
        }
        None => "n/a".to_string(),
    }
}

pub const REPORT_HEADER: &str = "scenario | shots | model | accuracy | precision | recall";

/// Header line followed by one row per report.
pub fn format_report(reports: &[EvalReport]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{} | {} | {} | {} | {} | {}",
            r.scenario(),
            r.shots,
            r.model,
            format_value(Some(r.accuracy)),
            format_value(r.positive_precision()),
            format_value(r.positive_recall()),
        );
    }
    out
}

/// Per-class precision/recall lines, positive class first.
pub fn format_class_breakdown(report: &EvalReport) -> String {
    let mut out = String::new();
    for k in report.class_order() {
        let name = report.class_names.get(k).map_or_else(|| k.to_string(), Clone::clone);
        let _ = writeln!(
            out,
            "  {name}: precision {} recall {}",
            format_value(report.precision[k]),
            format_value(report.recall[k])
        );
    }
    out
}

/// One JSON object per line.
pub fn reports_to_jsonl(reports: &[EvalReport]) -> serde_json::Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

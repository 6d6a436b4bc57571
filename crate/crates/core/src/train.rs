//! Episodic training: Adam, reduce-on-plateau learning rate, early stopping.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, Episode, EpisodeSampler, EpisodeSpec};
use crate::encoder::{Encoder, EncoderError, ParamSet};
use crate::head::{prototypical_loss, Distance, HeadError};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("episode {episode}: {source}")]
    Sampling { episode: usize, source: DataError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ways: usize,
    pub shots: usize,
    pub query: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr0: f64,
    pub plateau_patience_epochs: usize,
    pub plateau_factor: f64,
    pub early_stop_patience_epochs: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub distance: Distance,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ways: 2,
            shots: 5,
            query: 5,
            epochs: 10,
            episodes_per_epoch: 200,
            lr0: 1e-3,
            plateau_patience_epochs: 3,
            plateau_factor: 0.1,
            early_stop_patience_epochs: 5,
            min_delta: 1e-4,
            seed: 0,
            distance: Distance::SquaredEuclidean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.episodes_per_epoch < 1 {
            return bad("episodes_per_epoch must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.ways < 1 || self.shots < 1 || self.query < 1 {
            return bad("ways, shots and query must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be non-negative");
        }
        Ok(())
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec { way: self.ways, shot: self.shots, query: self.query }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(AdamConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// Nothing was changed because a gradient held a non-finite value.
    Skipped { param: String },
}

/// One bias-corrected Adam update of every trainable parameter. Frozen
/// parameters are never touched; a trainable parameter without a gradient is
/// treated as having a zero gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> StepOutcome {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        log::warn!("non-finite gradient for `{name}`; optimizer step skipped");
        return StepOutcome::Skipped { param: name.clone() };
    }
    state.t += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (name, param) in params.iter_mut().filter(|(_, p)| p.trainable) {
        let n = param.tensor.len();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let grad = grads.get(name).map(|g| g.data());
        for (i, w) in param.tensor.data_mut().iter_mut().enumerate() {
            let g = grad.map_or(0.0, |g| g[i] as f64);
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * g;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    StepOutcome::Applied
}

/// Decision taken after observing one epoch's loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochDecision {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Patience bookkeeping for plateau learning-rate reduction and early stopping.
///
/// Improvement means beating the best loss so far by more than `min_delta`.
/// A learning-rate reduction resets the plateau counter only.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauController {
    lr: f64,
    best: f64,
    plateau_wait: usize,
    stop_wait: usize,
    reductions: usize,
    plateau_patience: usize,
    stop_patience: usize,
    factor: f64,
    min_delta: f64,
}

impl PlateauController {
    pub fn new(config: &TrainConfig) -> Self {
        PlateauController {
            lr: config.lr0,
            best: f64::INFINITY,
            plateau_wait: 0,
            stop_wait: 0,
            reductions: 0,
            plateau_patience: config.plateau_patience_epochs,
            stop_patience: config.early_stop_patience_epochs,
            factor: config.plateau_factor,
            min_delta: config.min_delta,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    pub fn observe(&mut self, loss: f64) -> EpochDecision {
        let improved = loss.is_finite() && loss < self.best - self.min_delta;
        let mut lr_reduced = false;
        if improved {
            self.best = loss;
            self.plateau_wait = 0;
            self.stop_wait = 0;
        } else {
            self.plateau_wait += 1;
            self.stop_wait += 1;
            if self.plateau_wait >= self.plateau_patience {
                self.lr *= self.factor;
                self.reductions += 1;
                self.plateau_wait = 0;
                lr_reduced = true;
            }
        }
        EpochDecision { improved, lr_reduced, stop: self.stop_wait >= self.stop_patience }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Completed,
    EarlyStop,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStop => "early-stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub wall_secs: f64,
    pub skipped_steps: usize,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_loss: f64,
}

impl TrainHistory {
    /// CSV with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr,wall_secs,skipped_steps,improved\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.6},{:e},{:.3},{},{}\n",
                e.epoch, e.mean_loss, e.lr, e.wall_secs, e.skipped_steps, e.improved
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped: usize,
}

/// Encoder plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub encoder: Encoder,
    pub config: TrainConfig,
    pub adam: AdamState,
}

impl Trainer {
    pub fn new(encoder: Encoder, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { encoder, config, adam: AdamState::default() })
    }

    /// Forward, loss, backward and one optimizer step on `episode`; returns the
    /// pre-step loss.
    pub fn train_episode(&mut self, data: &Dataset, episode: &Episode, lr: f64) -> Result<(f64, StepOutcome)> {
        let batch = data.batch(&episode.all_indices())?;
        let mut graph = Graph::<f32>::new();
        let bound = self.encoder.bind(&mut graph);
        let input = graph.constant(batch);
        let fwd = self.encoder.forward(&mut graph, &bound, input)?;
        let (ns, nq) = (episode.support.len(), episode.query.len());
        let support = graph.rows(fwd.embedding, 0, ns)?;
        let queries = graph.rows(fwd.embedding, ns, nq)?;
        let head = prototypical_loss(
            &mut graph,
            support,
            &episode.support_labels(),
            queries,
            &episode.query_labels(),
            episode.way,
            self.config.distance,
        )?;
        let clamped = graph.clamp_events(head.loss);
        if clamped > 0 {
            log::debug!("{clamped} query probabilities clamped before log");
        }
        let loss = graph.value(head.loss).data()[0] as f64;
        match graph.backward(head.loss) {
            Ok(()) => {}
            Err(TensorError::NonFinite { op }) => {
                log::warn!("non-finite gradient in `{op}`; optimizer step skipped");
                return Ok((loss, StepOutcome::Skipped { param: op.to_string() }));
            }
            Err(e) => return Err(e.into()),
        }
        let grads: BTreeMap<String, Tensor> = bound
            .iter()
            .filter_map(|(name, var)| graph.grad(var).map(|g| (name.to_string(), g.clone())))
            .collect();
        let outcome = adam_step(&mut self.encoder.params, &grads, &mut self.adam, lr);
        Ok((loss, outcome))
    }

    /// `episodes_per_epoch` sampled episodes, one optimizer step each.
    pub fn run_epoch(&mut self, data: &Dataset, sampler: &mut EpisodeSampler, lr: f64) -> Result<EpochStats> {
        let mut total = 0.0;
        let mut skipped = 0;
        for episode in 0..self.config.episodes_per_epoch {
            let ep = sampler.next_episode().map_err(|source| TrainError::Sampling { episode, source })?;
            let (loss, outcome) = self.train_episode(data, &ep, lr)?;
            total += loss;
            if outcome != StepOutcome::Applied {
                skipped += 1;
            }
        }
        let steps = self.config.episodes_per_epoch;
        Ok(EpochStats { mean_loss: total / steps as f64, steps, skipped })
    }
}

/// Trains up to `config.epochs` epochs and returns the encoder from the
/// best-loss epoch. `on_best` is called whenever a new best epoch completes.
pub fn fit(
    encoder: Encoder,
    data: &Dataset,
    config: &TrainConfig,
    mut on_best: impl FnMut(&Encoder, &EpochRecord),
) -> Result<(Encoder, TrainHistory)> {
    let mut trainer = Trainer::new(encoder, config.clone())?;
    let mut sampler = EpisodeSampler::new(data, config.episode_spec(), config.seed)?;
    let mut control = PlateauController::new(config);
    let mut best = trainer.encoder.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::Completed;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = control.lr();
        let stats = trainer.run_epoch(data, &mut sampler, lr)?;
        let decision = control.observe(stats.mean_loss);
        let record = EpochRecord {
            epoch,
            mean_loss: stats.mean_loss,
            lr,
            wall_secs: started.elapsed().as_secs_f64(),
            skipped_steps: stats.skipped,
            improved: decision.improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {lr:e}{}",
            stats.mean_loss,
            if decision.lr_reduced { " (lr reduced)" } else { "" }
        );
        if decision.improved {
            best = trainer.encoder.clone();
            best_epoch = epoch;
            on_best(&best, &record);
        }
        epochs.push(record);
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let history = TrainHistory { epochs, stop_reason, best_epoch, best_loss: control.best() };
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f32, trainable: bool) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value), trainable);
        p
    }

    fn grads(value: f32) -> BTreeMap<String, Tensor> {
        [("w".to_string(), Tensor::scalar(value))].into()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = one_param(1.0, true);
        let mut s = AdamState::default();
        assert_eq!(adam_step(&mut p, &grads(1.0), &mut s, 1e-3), StepOutcome::Applied);
        let w = p.get("w").unwrap().tensor.data()[0];
        assert!((w as f64 - 0.999).abs() < 1e-6, "{w}");
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = one_param(0.123_456_7, true);
        let before = p.clone();
        let mut s = AdamState::default();
        adam_step(&mut p, &grads(0.0), &mut s, 1e-3);
        assert_eq!(p.get("w").unwrap().tensor.data()[0].to_bits(), before.get("w").unwrap().tensor.data()[0].to_bits());
    }

    #[test]
    fn frozen_param_is_untouched() {
        let mut p = one_param(2.0, false);
        let mut s = AdamState::default();
        adam_step(&mut p, &grads(5.0), &mut s, 0.1);
        assert_eq!(p.get("w").unwrap().tensor.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut p = one_param(1.0, true);
        let mut s = AdamState::default();
        let out = adam_step(&mut p, &grads(f32::NAN), &mut s, 0.1);
        assert!(matches!(out, StepOutcome::Skipped { .. }));
        assert_eq!(p.get("w").unwrap().tensor.data()[0], 1.0);
        assert_eq!(s.step_count(), 0);
    }

    fn drive(losses: &[f64], config: &TrainConfig) -> (Vec<EpochDecision>, PlateauController) {
        let mut c = PlateauController::new(config);
        let mut out = Vec::new();
        for &l in losses {
            let d = c.observe(l);
            out.push(d);
            if d.stop {
                break;
            }
        }
        (out, c)
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let cfg = TrainConfig::default();
        let (d, c) = drive(&[1.0, 1.0, 1.0, 1.0], &cfg);
        assert_eq!(d.iter().map(|d| d.lr_reduced).collect::<Vec<_>>(), [false, false, false, true]);
        assert!((c.lr() - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn flat_losses_trigger_early_stop() {
        let cfg = TrainConfig::default();
        let (d, _) = drive(&[1.0; 10], &cfg);
        assert!(d.last().unwrap().stop);
        assert_eq!(d.len(), 6);
    }

    #[test]
    fn decreasing_losses_never_reduce() {
        let cfg = TrainConfig::default();
        let losses: Vec<f64> = (0..10).map(|i| 1.0 - 0.05 * i as f64).collect();
        let (d, c) = drive(&losses, &cfg);
        assert_eq!(d.len(), 10);
        assert!(d.iter().all(|d| d.improved && !d.lr_reduced && !d.stop));
        assert_eq!(c.lr(), cfg.lr0);
    }

    #[test]
    fn improvement_below_min_delta_does_not_count() {
        let cfg = TrainConfig::default();
        let (d, _) = drive(&[1.0, 0.99995, 0.9], &cfg);
        assert!(!d[1].improved);
        assert!(d[2].improved);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { episodes_per_epoch: 0, ..Default::default() },
            TrainConfig { plateau_factor: 1.0, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}

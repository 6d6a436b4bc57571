//! Run configuration: a TOML file, overridden by command-line flags and echoed
//! back to the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use protonet_core::encoder::{Archetype, EncoderConfig, DEFAULT_CONV_EMBED_DIM};
use protonet_core::head::Distance;
use protonet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub scenario: ScenarioConfig,
    pub encoder: EncoderSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub explain: ExplainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            data: DataConfig::default(),
            scenario: ScenarioConfig::default(),
            encoder: EncoderSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            explain: ExplainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source manifest for `prepare`. Relative image paths resolve against its directory.
    pub manifest: Option<PathBuf>,
    pub train_fraction: f64,
    pub convex_only: bool,
    /// LUSS scores kept for the normal class; unset disables the filter.
    pub luss_normal: Option<Vec<u8>>,
    /// LUSS scores kept for the COVID-19 class; unset disables the filter.
    pub luss_covid: Option<Vec<u8>>,
    pub normal_class: String,
    pub crop_top_fraction: f64,
    pub target_size: usize,
    pub channels: usize,
    /// Rotate training images by 0/90/180/270 degrees.
    pub augment: bool,
    /// Also rotate test images.
    pub augment_test: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            train_fraction: 0.9,
            convex_only: true,
            luss_normal: None,
            luss_covid: None,
            normal_class: "normal".into(),
            crop_top_fraction: 0.0,
            target_size: 64,
            channels: 1,
            augment: true,
            augment_test: false,
        }
    }
}

/// How dataset classes collapse into the classes of a K-way scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub ways: usize,
    /// Reported first; its precision and recall fill the table row.
    pub positive: String,
    /// Explicit dataset-class to scenario-class map. Replaces the defaults.
    pub groups: Option<BTreeMap<String, String>>,
    /// Dataset classes excluded when `groups` is given.
    pub drop: Vec<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig { ways: 2, positive: "covid".into(), groups: None, drop: Vec::new() }
    }
}

pub const NEGATIVE: &str = "negative";
pub const OTHER: &str = "other";

impl ScenarioConfig {
    /// Scenario class for each dataset class (`None` drops it).
    ///
    /// Defaults: 2-way keeps the positive class and merges everything else
    /// into `negative`; 3-way drops `other`; 4-way is the identity.
    pub fn grouping(&self, classes: &[String]) -> Result<Vec<Option<String>>> {
        if let Some(groups) = &self.groups {
            return classes
                .iter()
                .map(|c| match (groups.get(c), self.drop.contains(c)) {
                    (Some(_), true) => bail!("class `{c}` is both grouped and dropped"),
                    (Some(g), false) => Ok(Some(g.clone())),
                    (None, true) => Ok(None),
                    (None, false) => bail!("scenario.groups does not map dataset class `{c}`"),
                })
                .collect();
        }
        Ok(match self.ways {
            2 => {
                if !classes.contains(&self.positive) {
                    bail!("2-way scenario needs the positive class `{}` in the manifest", self.positive);
                }
                classes
                    .iter()
                    .map(|c| Some(if *c == self.positive { c.clone() } else { NEGATIVE.to_string() }))
                    .collect()
            }
            3 => classes.iter().map(|c| (c != OTHER).then(|| c.clone())).collect(),
            4 => classes.iter().cloned().map(Some).collect(),
            k => bail!("no default grouping for {k}-way; set scenario.groups"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub archetype: Archetype,
    /// Defaults to 64 for conv-net and to `ways` for frozen-embed.
    pub embed_dim: Option<usize>,
    pub conv_blocks: usize,
    pub channels_per_block: usize,
    pub frozen_blocks: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let base = EncoderConfig::default();
        EncoderSection {
            archetype: Archetype::ConvNet,
            embed_dim: None,
            conv_blocks: base.conv_blocks,
            channels_per_block: base.channels_per_block,
            frozen_blocks: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub shots: usize,
    /// Queries per class; defaults to `shots`.
    pub query: Option<usize>,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub lr0: f64,
    pub plateau_patience_epochs: usize,
    pub plateau_factor: f64,
    pub early_stop_patience_epochs: usize,
    pub min_delta: f64,
    pub distance: Distance,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            shots: t.shots,
            query: None,
            epochs: t.epochs,
            episodes_per_epoch: t.episodes_per_epoch,
            lr0: t.lr0,
            plateau_patience_epochs: t.plateau_patience_epochs,
            plateau_factor: t.plateau_factor,
            early_stop_patience_epochs: t.early_stop_patience_epochs,
            min_delta: t.min_delta,
            distance: t.distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    /// Shot counts to evaluate; empty means `train.shots` only.
    pub shots: Vec<usize>,
    /// Name in the report's model column; defaults to the encoder archetype.
    pub model_name: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: protonet_core::eval::EvalConfig::DEFAULT_EPISODES, shots: Vec::new(), model_name: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainSection {
    pub threshold: f64,
    pub alpha: f64,
    /// Evaluation episodes scanned for candidates; defaults to `eval.episodes`.
    pub episodes: Option<usize>,
    /// Cap on emitted maps; unset emits every selected query.
    pub limit: Option<usize>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection { threshold: 0.999, alpha: 0.5, episodes: None, limit: None }
    }
}

/// Command-line values that replace file values when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    pub query: Option<usize>,
    pub encoder: Option<Archetype>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.ways {
            self.scenario.ways = v;
        }
        if let Some(v) = o.shots {
            self.train.shots = v;
        }
        if let Some(v) = o.query {
            self.train.query = Some(v);
        }
        if let Some(v) = o.encoder {
            self.encoder.archetype = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.ways < 2 {
            bail!("scenario.ways must be at least 2");
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            bail!("data.train_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.data.crop_top_fraction) {
            bail!("data.crop_top_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.explain.alpha) {
            bail!("explain.alpha must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.explain.threshold) {
            bail!("explain.threshold must lie in [0, 1)");
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be at least 1");
        }
        self.train_config().validate()?;
        Ok(())
    }

    pub fn query(&self) -> usize {
        self.train.query.unwrap_or(self.train.shots)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            ways: self.scenario.ways,
            shots: t.shots,
            query: self.query(),
            epochs: t.epochs,
            episodes_per_epoch: t.episodes_per_epoch,
            lr0: t.lr0,
            plateau_patience_epochs: t.plateau_patience_epochs,
            plateau_factor: t.plateau_factor,
            early_stop_patience_epochs: t.early_stop_patience_epochs,
            min_delta: t.min_delta,
            seed: self.seed,
            distance: t.distance,
        }
    }

    /// Encoder for this run. `frozen_dim` is only used by frozen-embed.
    pub fn encoder_config(&self, frozen_dim: usize) -> EncoderConfig {
        let e = &self.encoder;
        match e.archetype {
            Archetype::ConvNet => EncoderConfig {
                embed_dim: e.embed_dim.unwrap_or(DEFAULT_CONV_EMBED_DIM),
                conv_blocks: e.conv_blocks,
                channels_per_block: e.channels_per_block,
                frozen_blocks: e.frozen_blocks,
                ..EncoderConfig::conv_net(self.data.target_size, self.data.channels)
            },
            Archetype::FrozenEmbed => EncoderConfig {
                embed_dim: e.embed_dim.unwrap_or(self.scenario.ways),
                ..EncoderConfig::frozen_embed(frozen_dim, self.scenario.ways)
            },
        }
    }

    pub fn eval_shots(&self) -> Vec<usize> {
        if self.eval.shots.is_empty() {
            vec![self.train.shots]
        } else {
            self.eval.shots.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes `effective_config.toml` into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// First field where two encoder configs differ, as `(name, checkpoint, config)`.
pub fn first_mismatch(checkpoint: &EncoderConfig, wanted: &EncoderConfig) -> Option<(&'static str, String, String)> {
    macro_rules! check {
        ($($field:ident),*) => {
            $(
                if checkpoint.$field != wanted.$field {
                    return Some((
                        stringify!($field),
                        format!("{:?}", checkpoint.$field),
                        format!("{:?}", wanted.$field),
                    ));
                }
            )*
        };
    }
    check!(archetype, input_channels, input_size, embed_dim, conv_blocks, channels_per_block, frozen_blocks, frozen_dim);
    None
}

//! Embedding networks mapping an input sample to an `embed_dim` vector.
//!
//! Two archetypes are provided:
//!
//! * [`Archetype::ConvNet`]: `conv_blocks` repetitions of
//!   `conv3x3(pad 1) -> relu -> maxpool2`, then flatten and a linear map. The
//!   first `frozen_blocks` blocks can be frozen to mimic partial fine-tuning.
//! * [`Archetype::FrozenEmbed`]: the backbone is represented by a fixed,
//!   precomputed feature vector; only a final linear layer is trained.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match encoder, expected {expected:?}")]
    Input { got: Vec<usize>, expected: Vec<usize> },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("{0} encoder has no convolutional feature maps")]
    NoFeatureMaps(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = EncoderError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    ConvNet,
    FrozenEmbed,
}

impl Archetype {
    pub fn name(self) -> &'static str {
        match self {
            Archetype::ConvNet => "conv-net",
            Archetype::FrozenEmbed => "frozen-embed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub archetype: Archetype,
    #[serde(default = "defaults::channels")]
    pub input_channels: usize,
    #[serde(default = "defaults::size")]
    pub input_size: usize,
    pub embed_dim: usize,
    #[serde(default = "defaults::blocks")]
    pub conv_blocks: usize,
    #[serde(default = "defaults::width")]
    pub channels_per_block: usize,
    /// Leading conv blocks whose parameters are not updated.
    #[serde(default)]
    pub frozen_blocks: usize,
    /// Length of the precomputed feature vector (frozen-embed only).
    #[serde(default)]
    pub frozen_dim: usize,
}

mod defaults {
    pub fn channels() -> usize {
        1
    }
    pub fn size() -> usize {
        64
    }
    pub fn blocks() -> usize {
        4
    }
    pub fn width() -> usize {
        32
    }
}

pub const DEFAULT_CONV_EMBED_DIM: usize = 64;

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::conv_net(defaults::size(), defaults::channels())
    }
}

impl EncoderConfig {
    /// Four blocks of 32 channels projecting to 64 dimensions.
    pub fn conv_net(input_size: usize, input_channels: usize) -> Self {
        EncoderConfig {
            archetype: Archetype::ConvNet,
            input_channels,
            input_size,
            embed_dim: DEFAULT_CONV_EMBED_DIM,
            conv_blocks: defaults::blocks(),
            channels_per_block: defaults::width(),
            frozen_blocks: 0,
            frozen_dim: 0,
        }
    }

    /// Linear head over `frozen_dim` features with one output per class.
    pub fn frozen_embed(frozen_dim: usize, ways: usize) -> Self {
        EncoderConfig {
            archetype: Archetype::FrozenEmbed,
            input_channels: 1,
            input_size: 1,
            embed_dim: ways,
            conv_blocks: 0,
            channels_per_block: 0,
            frozen_blocks: 0,
            frozen_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        match self.archetype {
            Archetype::ConvNet => {
                if self.conv_blocks == 0 {
                    return bad("conv_blocks must be at least 1".into());
                }
                if self.channels_per_block == 0 || self.input_channels == 0 {
                    return bad("channel counts must be at least 1".into());
                }
                let step = 1usize << self.conv_blocks.min(31);
                if self.input_size == 0 || self.input_size % step != 0 {
                    return bad(format!(
                        "input_size {} is not divisible by 2^conv_blocks = {step}",
                        self.input_size
                    ));
                }
                if self.frozen_blocks > self.conv_blocks {
                    return bad(format!(
                        "frozen_blocks {} exceeds conv_blocks {}",
                        self.frozen_blocks, self.conv_blocks
                    ));
                }
            }
            Archetype::FrozenEmbed => {
                if self.frozen_dim == 0 {
                    return bad("frozen_dim must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.archetype {
            Archetype::ConvNet => vec![self.input_channels, self.input_size, self.input_size],
            Archetype::FrozenEmbed => vec![self.frozen_dim],
        }
    }

    /// Width of the flattened conv trunk output.
    fn trunk_dim(&self) -> usize {
        let side = self.input_size >> self.conv_blocks;
        self.channels_per_block * side * side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.len()).sum()
    }
}

/// Parameters placed on a graph, with trainable entries as differentiable leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| EncoderError::MissingParam(name.to_string()))
    }

    /// Replaces the node used for `name`, e.g. to differentiate through a
    /// parameter held as a graph input.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

pub fn block_kernel(i: usize) -> String {
    format!("block{i}.kernel")
}

pub fn block_bias(i: usize) -> String {
    format!("block{i}.bias")
}

pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-a..=a))
}

/// Deterministic Glorot-uniform weights and zero biases.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let fc_in = match config.archetype {
        Archetype::ConvNet => {
            let mut c_in = config.input_channels;
            let c_out = config.channels_per_block;
            for i in 0..config.conv_blocks {
                let trainable = i >= config.frozen_blocks;
                let kernel = glorot(&mut rng, &[c_out, c_in, 3, 3], c_in * 9, c_out * 9);
                params.insert(block_kernel(i), kernel, trainable);
                params.insert(block_bias(i), Tensor::zeros([c_out]), trainable);
                c_in = c_out;
            }
            config.trunk_dim()
        }
        Archetype::FrozenEmbed => config.frozen_dim,
    };
    let h = config.embed_dim;
    params.insert(FC_WEIGHT, glorot(&mut rng, &[h, fc_in], fc_in, h), true);
    params.insert(FC_BIAS, Tensor::zeros([h]), true);
    Ok(params)
}

/// Outputs of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[batch, embed_dim]`
    pub embedding: Var,
    /// Post-ReLU activations of the last conv layer, `[batch, c, h, w]`.
    pub last_conv: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Encoder { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let expected = init_params(&config, 0)?;
        for (name, p) in expected.iter() {
            let got = params.get(name).ok_or_else(|| EncoderError::MissingParam(name.into()))?;
            if got.tensor.shape() != p.tensor.shape() {
                return Err(EncoderError::Config(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    got.tensor.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(Encoder { config, params })
    }

    pub fn name(&self) -> &'static str {
        self.config.archetype.name()
    }

    /// Adds every parameter to `graph`; trainable ones become differentiable leaves.
    pub fn bind<T: Scalar>(&self, graph: &mut Graph<T>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.to_string(), graph.leaf(p.tensor.cast(), p.trainable)))
            .collect();
        BoundParams { vars }
    }

    /// Embeds a batch `[batch, sample_shape...]` already placed on the graph.
    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        params: &BoundParams,
        input: Var,
    ) -> Result<Forward> {
        let shape = graph.shape(input).to_vec();
        let sample = self.config.sample_shape();
        if shape.len() != sample.len() + 1 || shape[1..] != sample[..] {
            let mut expected = vec![shape.first().copied().unwrap_or(1)];
            expected.extend(sample);
            return Err(EncoderError::Input { got: shape, expected });
        }
        match self.config.archetype {
            Archetype::ConvNet => {
                let mut x = input;
                let mut last_conv = None;
                for i in 0..self.config.conv_blocks {
                    let k = params.var(&block_kernel(i))?;
                    let b = params.var(&block_bias(i))?;
                    let c = graph.conv2d(x, k, Some(b), 1, 1)?;
                    let r = graph.relu(c)?;
                    last_conv = Some(r);
                    x = graph.max_pool2d(r, 2)?;
                }
                let flat = graph.flatten(x)?;
                let embedding =
                    graph.linear(flat, params.var(FC_WEIGHT)?, Some(params.var(FC_BIAS)?))?;
                Ok(Forward { embedding, last_conv })
            }
            Archetype::FrozenEmbed => {
                let embedding =
                    graph.linear(input, params.var(FC_WEIGHT)?, Some(params.var(FC_BIAS)?))?;
                Ok(Forward { embedding, last_conv: None })
            }
        }
    }

    /// Inference-only embedding of a batch `[batch, sample_shape...]`.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut graph = Graph::<f32>::new();
        let params = self.bind_frozen(&mut graph);
        let input = graph.constant(batch.clone());
        let out = self.forward(&mut graph, &params, input)?;
        Ok(graph.value(out.embedding).clone())
    }

    fn bind_frozen(&self, graph: &mut Graph<f32>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.to_string(), graph.constant(p.tensor.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Embeds a single `[channels, size, size]` image.
    pub fn encode_convnet(&self, image: &Tensor) -> Result<Tensor> {
        if self.config.archetype != Archetype::ConvNet {
            return Err(EncoderError::Config("encode_convnet needs a conv-net encoder".into()));
        }
        self.embed_one(image)
    }

    /// Embeds a single precomputed `[frozen_dim]` feature vector.
    pub fn encode_frozen(&self, feature: &Tensor) -> Result<Tensor> {
        if self.config.archetype != Archetype::FrozenEmbed {
            return Err(EncoderError::Config("encode_frozen needs a frozen-embed encoder".into()));
        }
        self.embed_one(feature)
    }

    fn embed_one(&self, sample: &Tensor) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(sample.shape());
        let batch = sample.clone().reshape(shape)?;
        let out = self.embed(&batch)?;
        Ok(out.reshape([self.config.embed_dim])?)
    }
}

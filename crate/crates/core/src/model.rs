//! Generator and critic networks.
//!
//! The generator maps `z ∈ R^latent_dim` through two dense layers (ReLU,
//! optional layer norm) to a `[channels, base_len]` feature map, then through
//! transposed convolutions along time up to `[sites, horizon]`, finishing
//! with a sigmoid (or clamp) so outputs are per-unit capacity.
//!
//! The critic flattens `[sites, horizon]` and applies dense layers with
//! leaky-ReLU and dropout on every hidden output. Layer norm is used on the
//! hidden layers except the last one, so the final two affine maps stay
//! plain. Its score is linear by default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scengan_autodiff::{ConvGeometry, Graph, NodeId, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::{CheckpointFault, Error, Result};
use crate::nn::{self, LayerSpec};

pub const GENERATOR_PREFIX: &str = "g.";
pub const CRITIC_PREFIX: &str = "d.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputNonlinearity {
    Sigmoid,
    Clamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticOutput {
    Linear,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchitectureConfig {
    pub latent_dim: usize,
    pub sites: usize,
    pub horizon: usize,
    pub g_hidden: usize,
    pub g_base_channels: usize,
    /// Channels between consecutive transposed convolutions; one fewer
    /// entry than `g_deconv_strides` (the last layer outputs `sites`).
    pub g_deconv_channels: Vec<usize>,
    pub g_deconv_kernel: usize,
    pub g_deconv_strides: Vec<usize>,
    pub g_layer_norm: bool,
    pub d_hidden: Vec<usize>,
    pub d_layer_norm: bool,
    pub leak_slope: f64,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub output: OutputNonlinearity,
    pub critic_output: CriticOutput,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            sites: 4,
            horizon: 24,
            g_hidden: 128,
            g_base_channels: 32,
            g_deconv_channels: vec![16, 8],
            g_deconv_kernel: 5,
            g_deconv_strides: vec![2, 2, 2],
            g_layer_norm: true,
            d_hidden: vec![128, 64],
            d_layer_norm: true,
            leak_slope: 0.2,
            dropout: 0.2,
            layer_norm_eps: 1e-5,
            output: OutputNonlinearity::Sigmoid,
            critic_output: CriticOutput::Linear,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl ArchitectureConfig {
    pub fn stride_product(&self) -> usize {
        self.g_deconv_strides.iter().product()
    }

    /// Length of the generator's first feature map.
    pub fn base_len(&self) -> usize {
        self.horizon / self.stride_product().max(1)
    }

    pub fn features(&self) -> usize {
        self.sites * self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.sites == 0 {
            return bad("sites must be at least 1".into());
        }
        if self.horizon < 2 {
            return bad("horizon must be at least 2".into());
        }
        if self.g_deconv_strides.is_empty() || self.g_deconv_strides.contains(&0) {
            return bad("g_deconv_strides must be a non-empty list of positive strides".into());
        }
        if !self.horizon.is_multiple_of(self.stride_product()) {
            return bad(format!(
                "horizon {} is not a multiple of the deconv stride product {}",
                self.horizon,
                self.stride_product()
            ));
        }
        if self.g_deconv_channels.len() + 1 != self.g_deconv_strides.len() {
            return bad(format!(
                "g_deconv_channels needs {} entries for {} deconv layers",
                self.g_deconv_strides.len() - 1,
                self.g_deconv_strides.len()
            ));
        }
        let mut len = self.base_len();
        for &stride in &self.g_deconv_strides {
            let geo = ConvGeometry {
                batch: 1,
                in_channels: 1,
                out_channels: 1,
                len,
                kernel: self.g_deconv_kernel,
                stride,
            };
            if geo.kernel > geo.out_len() + 2 * geo.pad() {
                return bad(format!(
                    "g_deconv_kernel {} is longer than the padded output ({}) of a stride-{stride} layer on length {len}",
                    geo.kernel,
                    geo.out_len() + 2 * geo.pad()
                ));
            }
            len = geo.out_len();
        }
        if self.d_hidden.is_empty() {
            return bad("d_hidden must list at least one hidden width".into());
        }
        for layer in self.generator_layers().iter().chain(&self.discriminator_layers()) {
            layer.validate()?;
        }
        Ok(())
    }

    pub fn generator_layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let base = self.g_base_channels * self.base_len();
        for (input, output) in [(self.latent_dim, self.g_hidden), (self.g_hidden, base)] {
            layers.push(LayerSpec::Dense { input, output });
            if self.g_layer_norm {
                layers.push(LayerSpec::LayerNorm {
                    features: output,
                    eps: self.layer_norm_eps,
                });
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Reshape {
            shape: vec![self.g_base_channels, self.base_len()],
        });
        let mut channels = vec![self.g_base_channels];
        channels.extend(&self.g_deconv_channels);
        channels.push(self.sites);
        for (i, &stride) in self.g_deconv_strides.iter().enumerate() {
            layers.push(LayerSpec::ConvTranspose1d {
                in_channels: channels[i],
                out_channels: channels[i + 1],
                kernel: self.g_deconv_kernel,
                stride,
            });
            if i + 1 < self.g_deconv_strides.len() {
                layers.push(LayerSpec::Relu);
            }
        }
        layers.push(match self.output {
            OutputNonlinearity::Sigmoid => LayerSpec::Sigmoid,
            OutputNonlinearity::Clamp => LayerSpec::Clamp,
        });
        layers
    }

    pub fn discriminator_layers(&self) -> Vec<LayerSpec> {
        let mut layers = vec![LayerSpec::Reshape {
            shape: vec![self.features()],
        }];
        let mut width = self.features();
        for (i, &h) in self.d_hidden.iter().enumerate() {
            layers.push(LayerSpec::Dense { input: width, output: h });
            if self.d_layer_norm && i + 1 < self.d_hidden.len() {
                layers.push(LayerSpec::LayerNorm {
                    features: h,
                    eps: self.layer_norm_eps,
                });
            }
            layers.push(LayerSpec::LeakyRelu { slope: self.leak_slope });
            layers.push(LayerSpec::Dropout { p: self.dropout });
            width = h;
        }
        layers.push(LayerSpec::Dense { input: width, output: 1 });
        if self.critic_output == CriticOutput::Sigmoid {
            layers.push(LayerSpec::Sigmoid);
        }
        layers
    }

    /// Width of the critic's second-to-last layer output.
    pub fn feature_width(&self) -> usize {
        *self.d_hidden.last().expect("validated non-empty")
    }

    /// Canonical `key=value` text, one key per line in a fixed order.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("latent_dim", self.latent_dim.to_string());
        kv("sites", self.sites.to_string());
        kv("horizon", self.horizon.to_string());
        kv("g_hidden", self.g_hidden.to_string());
        kv("g_base_channels", self.g_base_channels.to_string());
        kv("g_deconv_channels", join(&self.g_deconv_channels));
        kv("g_deconv_kernel", self.g_deconv_kernel.to_string());
        kv("g_deconv_strides", join(&self.g_deconv_strides));
        kv("g_layer_norm", self.g_layer_norm.to_string());
        kv("d_hidden", join(&self.d_hidden));
        kv("d_layer_norm", self.d_layer_norm.to_string());
        kv("leak_slope", format!("{:?}", self.leak_slope));
        kv("dropout", format!("{:?}", self.dropout));
        kv("layer_norm_eps", format!("{:?}", self.layer_norm_eps));
        kv(
            "output",
            match self.output {
                OutputNonlinearity::Sigmoid => "sigmoid",
                OutputNonlinearity::Clamp => "clamp",
            }
            .into(),
        );
        kv(
            "critic_output",
            match self.critic_output {
                CriticOutput::Linear => "linear",
                CriticOutput::Sigmoid => "sigmoid",
            }
            .into(),
        );
        s
    }

    /// Sets one key from its textual value. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let float = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let flag = |v: &str| v.trim().parse::<bool>().map_err(|_| bad());
        let list = |v: &str| parse_list(v).ok_or_else(bad);
        match key {
            "latent_dim" => self.latent_dim = num(value)?,
            "sites" => self.sites = num(value)?,
            "horizon" => self.horizon = num(value)?,
            "g_hidden" => self.g_hidden = num(value)?,
            "g_base_channels" => self.g_base_channels = num(value)?,
            "g_deconv_channels" => self.g_deconv_channels = list(value)?,
            "g_deconv_kernel" => self.g_deconv_kernel = num(value)?,
            "g_deconv_strides" => self.g_deconv_strides = list(value)?,
            "g_layer_norm" => self.g_layer_norm = flag(value)?,
            "d_hidden" => self.d_hidden = list(value)?,
            "d_layer_norm" => self.d_layer_norm = flag(value)?,
            "leak_slope" => self.leak_slope = float(value)?,
            "dropout" => self.dropout = float(value)?,
            "layer_norm_eps" => self.layer_norm_eps = float(value)?,
            "output" => {
                self.output = match value.trim() {
                    "sigmoid" => OutputNonlinearity::Sigmoid,
                    "clamp" => OutputNonlinearity::Clamp,
                    _ => return Err(bad()),
                }
            }
            "critic_output" => {
                self.critic_output = match value.trim() {
                    "linear" => CriticOutput::Linear,
                    "sigmoid" => CriticOutput::Sigmoid,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(Error::Config(format!("unknown architecture key `{key}`"))),
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "latent_dim",
        "sites",
        "horizon",
        "g_hidden",
        "g_base_channels",
        "g_deconv_channels",
        "g_deconv_kernel",
        "g_deconv_strides",
        "g_layer_norm",
        "d_hidden",
        "d_layer_norm",
        "leak_slope",
        "dropout",
        "layer_norm_eps",
        "output",
        "critic_output",
    ];

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed line `{line}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    /// Keys whose values differ between `self` and `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = self.to_canonical_text();
        let b = other.to_canonical_text();
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| format!("{x} vs {y}"))
            .collect()
    }

    /// Every trainable tensor, `(full name, shape)`, generator first.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (prefix, layers) in [
            (GENERATOR_PREFIX, self.generator_layers()),
            (CRITIC_PREFIX, self.discriminator_layers()),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                for (suffix, shape) in layer.param_shapes() {
                    out.push((format!("{prefix}{i}.{suffix}"), shape));
                }
            }
        }
        out
    }
}

/// All trainable weights of both networks plus bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ArchitectureConfig,
    pub tensors: BTreeMap<String, Tensor>,
    /// Completed generator iterations.
    pub iteration: u64,
    pub seed: u64,
}

/// How the critic treats its dropout layers.
pub enum DropoutMode<'a> {
    /// Evaluation: dropout disabled, output deterministic.
    Off,
    /// Training: fresh masks drawn from the stream.
    On(&'a mut dyn RngCore),
}

/// Graph handles for a bound parameter set.
#[derive(Clone, Debug, Default)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    /// Adds every tensor whose name starts with `prefix` to the graph, as
    /// differentiable inputs when `trainable`, else as constants.
    pub fn bind(g: &mut Graph, params: &ModelParams, prefix: &str, trainable: bool) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, t) in params.tensors.range(prefix.to_string()..) {
            if !name.starts_with(prefix) {
                break;
            }
            let id = if trainable {
                g.input(name.clone(), t.clone())?
            } else {
                g.constant(t.clone())?
            };
            nodes.insert(name.clone(), id);
        }
        Ok(Self { nodes })
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }
}

/// Output of a critic pass.
#[derive(Clone, Debug)]
pub struct CriticNodes {
    /// `[batch]`
    pub score: NodeId,
    /// `[batch, feature_width]`, the input of the final affine layer.
    pub features: NodeId,
    /// Dropout masks in layer order (empty in eval mode).
    pub masks: Vec<Tensor>,
}

struct Trace {
    output: NodeId,
    last_dense_input: Option<NodeId>,
    masks: Vec<Tensor>,
}

fn apply_layers(
    g: &mut Graph,
    layers: &[LayerSpec],
    prefix: &str,
    params: &ParamNodes,
    x: NodeId,
    dropout: &mut DropoutMode<'_>,
) -> Result<Trace> {
    let mut cur = x;
    let mut last_dense_input = None;
    let mut masks = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        let p = |suffix: &str| params.get(&format!("{prefix}{i}.{suffix}"));
        cur = match layer {
            LayerSpec::Dense { .. } => {
                last_dense_input = Some(cur);
                nn::dense_forward(g, cur, p("w")?, p("b")?)?
            }
            LayerSpec::ConvTranspose1d { stride, .. } => {
                nn::conv_transpose_1d_forward(g, cur, p("k")?, p("b")?, *stride)?
            }
            LayerSpec::Relu => g.relu(cur)?,
            LayerSpec::LeakyRelu { slope } => g.leaky_relu(cur, *slope)?,
            LayerSpec::Sigmoid => g.sigmoid(cur)?,
            LayerSpec::Clamp => g.clamp(cur, 0.0, 1.0)?,
            LayerSpec::LayerNorm { eps, .. } => nn::layer_norm_forward(g, cur, p("gain")?, p("bias")?, *eps)?,
            LayerSpec::Dropout { p } => match dropout {
                DropoutMode::Off => cur,
                DropoutMode::On(rng) => {
                    let (out, mask) = nn::dropout_apply(g, cur, *p, &mut **rng)?;
                    masks.push(mask);
                    out
                }
            },
            LayerSpec::Reshape { shape } => {
                let mut full = vec![g.shape(cur)[0]];
                full.extend(shape);
                g.reshape(cur, &full)?
            }
        };
    }
    Ok(Trace {
        output: cur,
        last_dense_input,
        masks,
    })
}

/// Generator graph: `z [batch, latent_dim] -> [batch, sites, horizon]`.
pub fn generator_graph(
    g: &mut Graph,
    config: &ArchitectureConfig,
    params: &ParamNodes,
    z: NodeId,
) -> Result<NodeId> {
    match *g.shape(z) {
        [_, d] if d == config.latent_dim => {}
        ref s => {
            return Err(Error::ConfigMismatch(format!(
                "latent batch has shape {s:?}, expected [batch, {}]",
                config.latent_dim
            )))
        }
    }
    let trace = apply_layers(
        g,
        &config.generator_layers(),
        GENERATOR_PREFIX,
        params,
        z,
        &mut DropoutMode::Off,
    )?;
    Ok(trace.output)
}

/// Critic graph: `x [batch, sites, horizon] -> score [batch]`.
pub fn critic_graph(
    g: &mut Graph,
    config: &ArchitectureConfig,
    params: &ParamNodes,
    x: NodeId,
    mut dropout: DropoutMode<'_>,
) -> Result<CriticNodes> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != config.sites || shape[2] != config.horizon {
        return Err(Error::ConfigMismatch(format!(
            "critic input has shape {shape:?}, expected [batch, {}, {}]",
            config.sites, config.horizon
        )));
    }
    let value = g.value(x);
    if value.data().iter().any(|&v| !(-0.1..=1.1).contains(&v)) {
        log::warn!("critic input has values outside [-0.1, 1.1]");
    }
    let trace = apply_layers(
        g,
        &config.discriminator_layers(),
        CRITIC_PREFIX,
        params,
        x,
        &mut dropout,
    )?;
    let score = g.reshape(trace.output, &[shape[0]])?;
    Ok(CriticNodes {
        score,
        features: trace.last_dense_input.expect("critic has a final dense layer"),
        masks: trace.masks,
    })
}

impl ModelParams {
    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn init(config: ArchitectureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (prefix, layers) in [
            (GENERATOR_PREFIX, config.generator_layers()),
            (CRITIC_PREFIX, config.discriminator_layers()),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                for (suffix, t) in layer.init_params(&mut rng) {
                    tensors.insert(format!("{prefix}{i}.{suffix}"), t);
                }
            }
        }
        Ok(Self {
            config,
            tensors,
            iteration: 0,
            seed,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Generator samples for a latent batch `[batch, latent_dim]`.
    pub fn generator_forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = ParamNodes::bind(&mut g, self, GENERATOR_PREFIX, false)?;
        let zn = g.constant(z.clone())?;
        let out = generator_graph(&mut g, &self.config, &nodes, zn)?;
        Ok(g.value(out).clone())
    }

    /// Critic scores `[batch]` and second-to-last-layer features.
    pub fn discriminator_forward(&self, x: &Tensor, dropout: DropoutMode<'_>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let nodes = ParamNodes::bind(&mut g, self, CRITIC_PREFIX, false)?;
        let xn = g.constant(x.clone())?;
        let out = critic_graph(&mut g, &self.config, &nodes, xn, dropout)?;
        Ok((g.value(out.score).clone(), g.value(out.features).clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_canonical_text(),
            iteration: self.iteration,
            seed: self.seed,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    /// Extracts model parameters from a checkpoint, ignoring any extra
    /// tensors (optimizer state) stored alongside them.
    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let malformed = |m: String| Error::Checkpoint {
            path: path.to_path_buf(),
            fault: CheckpointFault::Malformed(m),
        };
        let config = ArchitectureConfig::from_canonical_text(&ckpt.config_text)
            .map_err(|e| malformed(format!("stored architecture: {e}")))?;
        config.validate().map_err(|e| malformed(format!("stored architecture: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = ckpt
                .tensor(&name)
                .ok_or_else(|| malformed(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(malformed(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(malformed(format!("tensor `{name}` holds non-finite values")));
            }
            tensors.insert(name, t.clone());
        }
        Ok(Self {
            config,
            tensors,
            iteration: ckpt.iteration,
            seed: ckpt.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?, path)
    }

    /// Loads and checks the stored architecture against `expected`.
    pub fn load_expecting(path: &Path, expected: &ArchitectureConfig) -> Result<Self> {
        let params = Self::load(path)?;
        let diff = params.config.diff(expected);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(format!(
                "{} was written for a different architecture: {}",
                path.display(),
                diff.join("; ")
            )));
        }
        Ok(params)
    }
}

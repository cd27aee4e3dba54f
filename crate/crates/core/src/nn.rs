//! Layer primitives on top of the autodiff graph.
//!
//! Activations are `[batch, features]` for dense and layer-norm layers and
//! `[batch, channels, len]` for the transposed convolution, which runs along
//! time with sites carried as channels.

use rand::{Rng, RngCore};
use scengan_autodiff::{Graph, NodeId, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
    },
    /// Output length is exactly `stride * input length`.
    ConvTranspose1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    /// Hard clamp to `[0, 1]`.
    Clamp,
    LayerNorm {
        features: usize,
        eps: f64,
    },
    Dropout {
        p: f64,
    },
    /// Per-sample target shape; the batch dimension is kept.
    Reshape {
        shape: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::ConvTranspose1d { .. } => "conv_transpose_1d",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Clamp => "clamp",
            LayerSpec::LayerNorm { .. } => "layer_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} layer: {msg}", self.kind())));
        match self {
            LayerSpec::Dense { input, output } if *input == 0 || *output == 0 => {
                bad(format!("widths must be positive, got {input}->{output}"))
            }
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                stride,
            } if [*in_channels, *out_channels, *kernel, *stride].contains(&0) => {
                bad("channels, kernel and stride must be positive".into())
            }
            LayerSpec::LeakyRelu { slope } if !(*slope > 0.0 && *slope < 1.0) => {
                bad(format!("slope must lie in (0,1), got {slope}"))
            }
            LayerSpec::LayerNorm { features, eps } if *features == 0 || !(*eps > 0.0) => {
                bad("features and eps must be positive".into())
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(p) => {
                bad(format!("drop probability must lie in [0,1), got {p}"))
            }
            LayerSpec::Reshape { shape } if shape.is_empty() || shape.contains(&0) => {
                bad(format!("invalid shape {shape:?}"))
            }
            _ => Ok(()),
        }
    }

    /// Trainable tensors owned by this layer, as `(suffix, shape)`.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerSpec::Dense { input, output } => vec![("w", vec![input, output]), ("b", vec![output])],
            LayerSpec::ConvTranspose1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                ("k", vec![in_channels, out_channels, kernel]),
                ("b", vec![out_channels]),
            ],
            LayerSpec::LayerNorm { features, .. } => {
                vec![("gain", vec![features]), ("bias", vec![features])]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero,
    /// layer-norm gain one.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<(&'static str, Tensor)> {
        let fan_in = match *self {
            LayerSpec::Dense { input, .. } => input,
            LayerSpec::ConvTranspose1d {
                in_channels, kernel, ..
            } => in_channels * kernel,
            _ => 1,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = match name {
                    "w" | "k" => Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)),
                    "gain" => Tensor::ones(&shape),
                    _ => Tensor::zeros(&shape),
                };
                (name, t)
            })
            .collect()
    }
}

/// `y = x·w + b`.
pub fn dense_forward(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let batch = g.shape(x)[0];
    let xw = g.matmul(x, w)?;
    let bias = g.broadcast_rows(b, batch)?;
    Ok(g.add(xw, bias)?)
}

pub fn conv_transpose_1d_forward(
    g: &mut Graph,
    x: NodeId,
    kernel: NodeId,
    bias: NodeId,
    stride: usize,
) -> Result<NodeId> {
    Ok(g.conv_transpose_1d(x, kernel, bias, stride)?)
}

/// Row-wise normalization to zero mean and unit variance, then `gain ⊙ · + bias`.
///
/// Built from elementary ops so it is twice differentiable.
pub fn layer_norm_forward(
    g: &mut Graph,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let (rows, cols) = match *g.shape(x) {
        [r, c] => (r, c),
        ref s => return Err(Error::Config(format!("layer norm expects [batch, features], got {s:?}"))),
    };
    let inv_n = 1.0 / cols as f64;
    let mu = g.sum_cols(x)?;
    let mu = g.scale(mu, inv_n)?;
    let mu = g.broadcast_cols(mu, cols)?;
    let centered = g.sub(x, mu)?;
    let sq = g.mul(centered, centered)?;
    let var = g.sum_cols(sq)?;
    let var = g.scale(var, inv_n)?;
    let var = g.add_scalar(var, eps)?;
    let inv_std = g.pow(var, -0.5)?;
    let inv_std = g.broadcast_cols(inv_std, cols)?;
    let normed = g.mul(centered, inv_std)?;
    let gain = g.broadcast_rows(gain, rows)?;
    let bias = g.broadcast_rows(bias, rows)?;
    let scaled = g.mul(normed, gain)?;
    Ok(g.add(scaled, bias)?)
}

/// Inverted-dropout keep mask: each entry is `1/(1-p)` with probability
/// `1-p`, else 0.
pub fn dropout_mask(shape: &[usize], p: f64, rng: &mut (impl RngCore + ?Sized)) -> Tensor {
    if p == 0.0 {
        return Tensor::ones(shape);
    }
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Applies a fresh dropout mask and returns it, so the pass can be
/// reproduced exactly.
pub fn dropout_apply(
    g: &mut Graph,
    x: NodeId,
    p: f64,
    rng: &mut (impl RngCore + ?Sized),
) -> Result<(NodeId, Tensor)> {
    let mask = dropout_mask(g.shape(x), p, rng);
    let out = g.dropout(x, mask.clone())?;
    Ok((out, mask))
}

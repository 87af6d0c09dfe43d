//! MViTime: a one-dimensional MobileViT.
//!
//! A stride-2 convolutional stem feeds a sequence of inverted-residual (MV2)
//! and MobileViT blocks; global average pooling gives a feature vector that
//! goes either to the projection head (pre-training) or to the classifier.
//! Parameter shapes follow from [`ModelConfig`] alone, see [`layout`].

mod checkpoint;
pub mod layers;
mod network;

pub use checkpoint::{named, Architecture, Checkpoint, CheckpointMeta, CombineMode, CHECKPOINT_VERSION};
pub use layers::{fold_1d, unfold_1d};
pub use network::{Bound, InputNorm, Mvitime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("length {len} is not divisible by patch size {patch}")]
    IndivisibleLength { len: usize, patch: usize },
    #[error("parameter {name}: {reason}")]
    BadParameter { name: String, reason: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    /// No nonlinearity; makes the network linear for structural tests.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockConfig {
    Mv2 {
        channels: usize,
        stride: usize,
        expansion: usize,
    },
    Mvit {
        channels: usize,
        transformer_dim: usize,
        depth: usize,
        heads: usize,
        patch_size: usize,
        ffn_multiplier: usize,
    },
}

impl BlockConfig {
    pub fn channels(&self) -> usize {
        match *self {
            BlockConfig::Mv2 { channels, .. } | BlockConfig::Mvit { channels, .. } => channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_length: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub kernel_size: usize,
    pub blocks: Vec<BlockConfig>,
    pub projection_dim: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// The default MViTime-XS layout for inputs of length `input_length`.
    pub fn xs(input_length: usize) -> Self {
        let mv2 = |channels, stride| BlockConfig::Mv2 {
            channels,
            stride,
            expansion: 4,
        };
        let mvit = |channels, transformer_dim, depth| BlockConfig::Mvit {
            channels,
            transformer_dim,
            depth,
            heads: 4,
            patch_size: 2,
            ffn_multiplier: 2,
        };
        Self {
            input_length,
            stem_channels: 16,
            stem_stride: 2,
            kernel_size: 3,
            blocks: vec![
                mv2(24, 1),
                mv2(48, 2),
                mv2(64, 2),
                mvit(64, 96, 2),
                mv2(80, 2),
                mvit(80, 120, 4),
                mv2(96, 2),
                mvit(96, 144, 3),
            ],
            projection_dim: 128,
            n_classes: 5,
            activation: Activation::Silu,
        }
    }

    /// A few-thousand-parameter layout for tests and smoke runs.
    pub fn tiny(input_length: usize) -> Self {
        Self {
            input_length,
            stem_channels: 8,
            stem_stride: 2,
            kernel_size: 3,
            blocks: vec![
                BlockConfig::Mv2 {
                    channels: 8,
                    stride: 2,
                    expansion: 2,
                },
                BlockConfig::Mvit {
                    channels: 8,
                    transformer_dim: 8,
                    depth: 1,
                    heads: 2,
                    patch_size: 2,
                    ffn_multiplier: 2,
                },
                BlockConfig::Mv2 {
                    channels: 16,
                    stride: 2,
                    expansion: 2,
                },
            ],
            projection_dim: 16,
            n_classes: 5,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_classes != 5 {
            return bad(format!("n_classes must be 5, got {}", self.n_classes));
        }
        if self.input_length == 0 || self.stem_channels == 0 || self.stem_stride == 0 {
            return bad("input length, stem channels and stride must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if self.projection_dim < 2 {
            return bad("projection_dim must be at least 2".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            match *b {
                BlockConfig::Mv2 {
                    channels,
                    stride,
                    expansion,
                } => {
                    if channels == 0 || stride == 0 || expansion == 0 {
                        return bad(format!("block {i}: zero-sized MV2 block"));
                    }
                }
                BlockConfig::Mvit {
                    channels,
                    transformer_dim,
                    heads,
                    patch_size,
                    ffn_multiplier,
                    ..
                } => {
                    if channels == 0 || patch_size == 0 || heads == 0 || ffn_multiplier == 0 {
                        return bad(format!("block {i}: zero-sized MobileViT block"));
                    }
                    if transformer_dim % heads != 0 {
                        return bad(format!(
                            "block {i}: transformer_dim {transformer_dim} not divisible by {heads} heads"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, BlockConfig::channels)
    }

    /// Predicted `(channels, length)` after the stem and after every block.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let k = self.kernel_size;
        let stem_len = strided_len(self.input_length, k, self.stem_stride);
        let mut out = vec![(self.stem_channels, stem_len)];
        let mut len = stem_len;
        for b in &self.blocks {
            if let BlockConfig::Mv2 { stride, .. } = *b {
                len = strided_len(len, k, stride);
            }
            out.push((b.channels(), len));
        }
        out
    }

    /// Token count per stream inside each MobileViT block, in block order.
    pub fn token_counts(&self) -> Vec<usize> {
        let shapes = self.shapes();
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| match *b {
                BlockConfig::Mvit { patch_size, .. } => Some(shapes[i].1.div_ceil(patch_size)),
                BlockConfig::Mv2 { .. } => None,
            })
            .collect()
    }
}

/// Output length of a `kernel`-wide convolution with "same" padding and
/// stride `stride`: `ceil(len / stride)` for odd kernels.
pub fn strided_len(len: usize, kernel: usize, stride: usize) -> usize {
    (len + 2 * (kernel / 2) - kernel) / stride + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)` for weights, `±sqrt(1 / fan_in)` for
    /// one-dimensional biases.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.specs.push(ParamSpec { name, shape, init });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) {
        let fan_in = cin / groups * k;
        self.push(format!("{name}.weight"), vec![cout, cin / groups, k], Init::FanIn(fan_in));
        if bias {
            self.push(format!("{name}.bias"), vec![cout], Init::FanIn(fan_in));
        }
    }

    fn zero(&mut self, name: &str) {
        if let Some(p) = self.specs.iter_mut().find(|p| p.name == name) {
            p.init = Init::Zeros;
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.push(format!("{name}.weight"), vec![din, dout], Init::FanIn(din));
        self.push(format!("{name}.bias"), vec![dout], Init::FanIn(din));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.push(format!("{name}.gamma"), vec![d], Init::Ones);
        self.push(format!("{name}.beta"), vec![d], Init::Zeros);
    }
}

/// Every parameter of the network in a fixed order, derived from the config.
pub fn layout(config: &ModelConfig) -> Result<Vec<ParamSpec>, ModelError> {
    config.validate()?;
    let mut b = LayoutBuilder { specs: Vec::new() };
    let k = config.kernel_size;
    b.conv("stem", 1, config.stem_channels, k, 1, true);
    let mut cin = config.stem_channels;
    let mut tokens = config.token_counts().into_iter();
    for (i, block) in config.blocks.iter().enumerate() {
        let p = format!("blocks.{i}");
        match *block {
            BlockConfig::Mv2 {
                channels,
                expansion,
                ..
            } => {
                let hidden = cin * expansion;
                b.conv(&format!("{p}.expand"), cin, hidden, 1, 1, true);
                b.conv(&format!("{p}.depthwise"), hidden, hidden, k, hidden, true);
                b.conv(&format!("{p}.project"), hidden, channels, 1, 1, true);
                cin = channels;
            }
            BlockConfig::Mvit {
                channels,
                transformer_dim: d,
                depth,
                ffn_multiplier,
                ..
            } => {
                b.conv(&format!("{p}.local"), cin, cin, k, 1, true);
                b.conv(&format!("{p}.to_tokens"), cin, d, 1, 1, false);
                let t = tokens.next().expect("one token count per MobileViT block");
                b.push(format!("{p}.pos"), vec![t, d], Init::Zeros);
                for layer in 0..depth {
                    let q = format!("{p}.layers.{layer}");
                    b.norm(&format!("{q}.norm1"), d);
                    for proj in ["query", "key", "value", "out"] {
                        b.linear(&format!("{q}.{proj}"), d, d);
                    }
                    b.norm(&format!("{q}.norm2"), d);
                    b.linear(&format!("{q}.ffn1"), d, d * ffn_multiplier);
                    b.linear(&format!("{q}.ffn2"), d * ffn_multiplier, d);
                }
                b.norm(&format!("{p}.norm"), d);
                b.conv(&format!("{p}.from_tokens"), d, cin, 1, 1, true);
                b.conv(&format!("{p}.fuse"), 2 * cin, channels, k, 1, true);
                cin = channels;
            }
        }
    }
    let f = config.feature_dim();
    b.linear("proj.hidden", f, f);
    b.norm("proj.norm", f);
    b.linear("proj.out", f, config.projection_dim);
    // a random bias would dominate every embedding and pin the loss at chance
    b.zero("proj.out.bias");
    b.linear("head", f, config.n_classes);
    Ok(b.specs)
}

/// Parameter count implied by the config.
pub fn parameter_count(config: &ModelConfig) -> Result<usize, ModelError> {
    Ok(layout(config)?.iter().map(ParamSpec::numel).sum())
}


#[cfg(test)]
mod network_tests;

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::nn::{cst, Graph, Scalar, Tensor, Var};
use crate::rng::stream;

use super::layers::{activate, conv, layer_norm, linear, mobilevit_block, mv2_block};
use super::{layout, BlockConfig, Init, ModelConfig, ModelError, ParamSpec};

/// Graph variables of one network's parameters, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    by_name: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.try_get(name).ok_or_else(|| ModelError::BadParameter {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.by_name.get(name).copied()
    }

    /// Bind already-registered variables under the given names.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        let by_name = names.into_iter().zip(vars.iter().copied()).collect();
        Self {
            by_name,
            order: vars.to_vec(),
        }
    }

    /// Variables in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.order
    }
}

/// Affine input standardization `(x - mean) / std`, fitted on training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl InputNorm {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        for r in rows {
            for &v in r {
                let v = f64::from(v);
                n += 1;
                s += v;
                s2 += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }
}

/// Network parameters in [`layout`] order plus the input standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct Mvitime<T> {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
    pub input_norm: InputNorm,
}

impl<T: Scalar> Mvitime<T> {
    /// Fan-in uniform weights, zero biases and encodings, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let specs = layout(&config)?;
        let params = specs.iter().enumerate().map(|(i, s)| init_param(s, seed, i)).collect();
        Ok(Self {
            config,
            specs,
            params,
            input_norm: InputNorm::default(),
        })
    }

    pub fn from_params(
        config: ModelConfig,
        params: Vec<Tensor<T>>,
        input_norm: InputNorm,
    ) -> Result<Self, ModelError> {
        let specs = layout(&config)?;
        if specs.len() != params.len() {
            return Err(ModelError::BadParameter {
                name: "*".into(),
                reason: format!("{} tensors for {} parameters", params.len(), specs.len()),
            });
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.shape != p.shape() {
                return Err(ModelError::BadParameter {
                    name: s.name.clone(),
                    reason: format!("shape {:?}, expected {:?}", p.shape(), s.shape),
                });
            }
        }
        Ok(Self {
            config,
            specs,
            params,
            input_norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &mut self.params[i])
    }

    pub fn cast<U: Scalar>(&self) -> Mvitime<U> {
        Mvitime {
            config: self.config.clone(),
            specs: self.specs.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            input_norm: self.input_norm,
        }
    }

    /// Re-draw the classifier weights.
    pub fn reset_head(&mut self, seed: u64) {
        for (i, s) in self.specs.iter().enumerate() {
            if s.name.starts_with("head.") {
                self.params[i] = init_param(s, seed, i);
            }
        }
    }

    /// Register every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, true)
    }

    /// Register every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut b = Bound::default();
        for (s, p) in self.specs.iter().zip(&self.params) {
            let v = if trainable {
                g.param(p.clone())
            } else {
                g.constant(p.clone())
            };
            b.by_name.insert(s.name.clone(), v);
            b.order.push(v);
        }
        b
    }

    /// Standardized `[B, 1, L]` input tensor.
    pub fn input(&self, rows: &[&[f32]]) -> Result<Tensor<T>, ModelError> {
        let l = self.config.input_length;
        if let Some(r) = rows.iter().find(|r| r.len() != l) {
            return Err(ModelError::InvalidConfig(format!(
                "input of length {}, model expects {l}",
                r.len()
            )));
        }
        let (m, s) = (self.input_norm.mean, self.input_norm.std);
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(move |&v| cst::<T>((f64::from(v) - m) / s)))
            .collect();
        Ok(Tensor::new([rows.len(), 1, l], data)?)
    }

    /// Stem, blocks and global average pooling: `[B, 1, L] -> [B, F]`.
    pub fn features(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ModelError> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != 1 || s[2] != self.config.input_length {
            return Err(ModelError::InvalidConfig(format!(
                "input shape {s:?}, expected [B, 1, {}]",
                self.config.input_length
            )));
        }
        let act = self.config.activation;
        let h = conv(g, p, "stem", x, self.config.stem_stride, 1)?;
        let mut h = activate(g, h, act);
        for (i, b) in self.config.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}");
            h = match *b {
                BlockConfig::Mv2 { stride, .. } => mv2_block(g, p, &prefix, h, stride, act)?,
                BlockConfig::Mvit {
                    depth,
                    heads,
                    patch_size,
                    ..
                } => mobilevit_block(g, p, &prefix, h, depth, heads, patch_size, act)?,
            };
        }
        Ok(g.mean_last(h))
    }

    /// Two-layer MLP head followed by L2 normalization. The hidden layer is
    /// layer-normalized, which keeps its units from all saturating at once
    /// when the backbone features drift.
    pub fn project(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var, ModelError> {
        let h = linear(g, p, "proj.hidden", features)?;
        let h = layer_norm(g, p, "proj.norm", h)?;
        let h = activate(g, h, self.config.activation);
        let z = linear(g, p, "proj.out", h)?;
        Ok(g.l2_normalize(z))
    }

    /// Single affine layer to the five stage logits.
    pub fn classify(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var, ModelError> {
        linear(g, p, "head", features)
    }

    /// Per-block output shapes of an actual forward pass, for checking
    /// against [`ModelConfig::shapes`].
    pub fn traced_shapes(&self, batch: usize) -> Result<Vec<(usize, usize)>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind_frozen(&mut g);
        let x = g.constant(Tensor::zeros([batch, 1, self.config.input_length]));
        let act = self.config.activation;
        let h = conv(&mut g, &p, "stem", x, self.config.stem_stride, 1)?;
        let mut h = activate(&mut g, h, act);
        let mut out = vec![(g.shape(h)[1], g.shape(h)[2])];
        for (i, b) in self.config.blocks.iter().enumerate() {
            let prefix = format!("blocks.{i}");
            h = match *b {
                BlockConfig::Mv2 { stride, .. } => mv2_block(&mut g, &p, &prefix, h, stride, act)?,
                BlockConfig::Mvit {
                    depth,
                    heads,
                    patch_size,
                    ..
                } => mobilevit_block(&mut g, &p, &prefix, h, depth, heads, patch_size, act)?,
            };
            out.push((g.shape(h)[1], g.shape(h)[2]));
        }
        Ok(out)
    }
}

fn init_param<T: Scalar>(spec: &ParamSpec, seed: u64, index: usize) -> Tensor<T> {
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
        Init::FanIn(fan_in) => {
            // weights He-uniform, biases the narrower 1/sqrt(fan_in)
            let gain = if spec.shape.len() == 1 { 1.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let mut rng = stream(seed, "init", index as u64);
            let data = (0..spec.numel())
                .map(|_| cst::<T>(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(spec.shape.clone(), data).expect("spec shape")
        }
    }
}

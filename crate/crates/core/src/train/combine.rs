//! The trainable-network abstraction and the weighted combination of a
//! self-contrast and a cross-subject backbone.

use rand::Rng;

use crate::model::{
    named, Architecture, Bound, Checkpoint, CheckpointMeta, CombineMode, ModelError, Mvitime,
};
use crate::nn::{cst, Graph, Scalar, Tensor, Var};
use crate::rng::stream;

use super::TrainError;

/// Anything the training loop can optimize and the evaluator can query.
pub trait Network: Sync {
    fn input_length(&self) -> usize;
    fn params(&self) -> Vec<&Tensor<f32>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>>;
    /// Register all parameters in `g`, in [`Network::params`] order.
    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var>;
    /// Stage logits `[B, 5]` for raw (unstandardized) epochs.
    fn logits(&self, g: &mut Graph<f32>, vars: &[Var], rows: &[&[f32]]) -> Result<Var, ModelError>;
    fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint;
}

fn bound<T: Scalar>(model: &Mvitime<T>, vars: &[Var]) -> Bound {
    Bound::from_vars(model.specs().iter().map(|s| s.name.clone()), vars)
}

impl Network for Mvitime<f32> {
    fn input_length(&self) -> usize {
        self.config().input_length
    }

    fn params(&self) -> Vec<&Tensor<f32>> {
        Mvitime::params(self).iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        Mvitime::params_mut(self).iter_mut().collect()
    }

    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var> {
        let b = if trainable {
            Mvitime::bind(self, g)
        } else {
            self.bind_frozen(g)
        };
        b.vars().to_vec()
    }

    fn logits(&self, g: &mut Graph<f32>, vars: &[Var], rows: &[&[f32]]) -> Result<Var, ModelError> {
        let b = bound(self, vars);
        let x = g.constant(self.input(rows)?);
        let f = self.features(g, &b, x)?;
        self.classify(g, &b, f)
    }

    fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint::single(self, meta)
    }
}

/// Two backbones joined with weight `alpha` on the self-contrast branch.
///
/// In [`CombineMode::Features`] the pooled features are mixed and fed to a
/// fresh classifier; in [`CombineMode::Full`] each branch keeps its own
/// classifier and their logits are mixed.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedModel<T = f32> {
    pub mode: CombineMode,
    pub alpha: f64,
    pub self_branch: Mvitime<T>,
    pub cross_branch: Mvitime<T>,
    /// `[F, 5]` weight and `[5]` bias of the shared classifier (features mode only).
    pub head: Option<(Tensor<T>, Tensor<T>)>,
}

pub fn combine_backbones(
    self_branch: Mvitime<f32>,
    cross_branch: Mvitime<f32>,
    alpha: f64,
    mode: CombineMode,
    seed: u64,
) -> Result<CombinedModel, TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let (a, b) = (self_branch.config(), cross_branch.config());
    if a.input_length != b.input_length {
        return Err(TrainError::DimMismatch(format!(
            "input lengths {} and {}",
            a.input_length, b.input_length
        )));
    }
    let head = match mode {
        CombineMode::Features => {
            if a.feature_dim() != b.feature_dim() {
                return Err(TrainError::DimMismatch(format!(
                    "feature widths {} and {}",
                    a.feature_dim(),
                    b.feature_dim()
                )));
            }
            let f = a.feature_dim();
            let bound = (6.0 / f as f64).sqrt();
            let mut rng = stream(seed, "combine-head", 0);
            let w = (0..f * a.n_classes)
                .map(|_| rng.random_range(-bound..bound) as f32)
                .collect();
            Some((
                Tensor::new([f, a.n_classes], w)?,
                Tensor::zeros([a.n_classes]),
            ))
        }
        CombineMode::Full => {
            if a != b {
                return Err(TrainError::DimMismatch(
                    "full combination needs identical architectures".into(),
                ));
            }
            None
        }
    };
    Ok(CombinedModel {
        mode,
        alpha,
        self_branch,
        cross_branch,
        head,
    })
}

impl<T: Scalar> CombinedModel<T> {
    fn split(&self, vars: &[Var]) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let n1 = self.self_branch.params().len();
        let n2 = self.cross_branch.params().len();
        (vars[..n1].to_vec(), vars[n1..n1 + n2].to_vec(), vars[n1 + n2..].to_vec())
    }

    /// Mixed features (features mode) or mixed logits (full mode) before the
    /// shared classifier, for inspection.
    pub fn mixed(&self, g: &mut Graph<T>, vars: &[Var], rows: &[&[f32]]) -> Result<Var, ModelError> {
        let (vs, vc, _) = self.split(vars);
        let (bs, bc) = (bound(&self.self_branch, &vs), bound(&self.cross_branch, &vc));
        let xs = g.constant(self.self_branch.input(rows)?);
        let xc = g.constant(self.cross_branch.input(rows)?);
        let fs = self.self_branch.features(g, &bs, xs)?;
        let fc = self.cross_branch.features(g, &bc, xc)?;
        let (ys, yc) = match self.mode {
            CombineMode::Features => (fs, fc),
            CombineMode::Full => (
                self.self_branch.classify(g, &bs, fs)?,
                self.cross_branch.classify(g, &bc, fc)?,
            ),
        };
        let ys = g.scale(ys, cst::<T>(self.alpha));
        let yc = g.scale(yc, cst::<T>(1.0 - self.alpha));
        Ok(g.add(ys, yc)?)
    }

    /// Stage logits `[B, 5]`; `vars` as bound by [`Network::bind`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], rows: &[&[f32]]) -> Result<Var, ModelError> {
        let mixed = self.mixed(g, vars, rows)?;
        match self.mode {
            CombineMode::Full => Ok(mixed),
            CombineMode::Features => {
                let (_, _, vh) = self.split(vars);
                let y = g.linear(mixed, vh[0])?;
                Ok(g.add_suffix(y, vh[1])?)
            }
        }
    }

    /// Every parameter in binding order: self branch, cross branch, shared head.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.self_branch.params().iter().collect();
        v.extend(self.cross_branch.params());
        if let Some((w, b)) = &self.head {
            v.push(w);
            v.push(b);
        }
        v
    }

    pub fn cast<U: Scalar>(&self) -> CombinedModel<U> {
        CombinedModel {
            mode: self.mode,
            alpha: self.alpha,
            self_branch: self.self_branch.cast(),
            cross_branch: self.cross_branch.cast(),
            head: self.head.as_ref().map(|(w, b)| (w.cast(), b.cast())),
        }
    }
}

impl CombinedModel {
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, ModelError> {
        let Architecture::Combined {
            mode,
            alpha,
            self_config,
            self_norm,
            cross_config,
            cross_norm,
        } = &c.architecture
        else {
            return Err(ModelError::Format("expected a combined network".into()));
        };
        let self_branch = c.network(self_config, *self_norm, "self.")?;
        let cross_branch = c.network(cross_config, *cross_norm, "cross.")?;
        let head = match mode {
            CombineMode::Features => {
                let get = |n: &str| {
                    c.tensor(n).cloned().ok_or(ModelError::BadParameter {
                        name: n.into(),
                        reason: "absent from checkpoint".into(),
                    })
                };
                Some((get("combined_head.weight")?, get("combined_head.bias")?))
            }
            CombineMode::Full => None,
        };
        Ok(Self {
            mode: *mode,
            alpha: *alpha,
            self_branch,
            cross_branch,
            head,
        })
    }
}

impl Network for CombinedModel {
    fn input_length(&self) -> usize {
        self.self_branch.config().input_length
    }

    fn params(&self) -> Vec<&Tensor<f32>> {
        self.parameters()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut v: Vec<&mut Tensor<f32>> = self.self_branch.params_mut().iter_mut().collect();
        v.extend(self.cross_branch.params_mut());
        if let Some((w, b)) = &mut self.head {
            v.push(w);
            v.push(b);
        }
        v
    }

    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    fn logits(&self, g: &mut Graph<f32>, vars: &[Var], rows: &[&[f32]]) -> Result<Var, ModelError> {
        self.forward(g, vars, rows)
    }

    fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        let mut tensors = named(&self.self_branch, "self.");
        tensors.extend(named(&self.cross_branch, "cross."));
        if let Some((w, b)) = &self.head {
            tensors.push(("combined_head.weight".into(), w.clone()));
            tensors.push(("combined_head.bias".into(), b.clone()));
        }
        Checkpoint {
            architecture: Architecture::Combined {
                mode: self.mode,
                alpha: self.alpha,
                self_config: self.self_branch.config().clone(),
                self_norm: self.self_branch.input_norm,
                cross_config: self.cross_branch.config().clone(),
                cross_norm: self.cross_branch.input_norm,
            },
            meta,
            tensors,
        }
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its variables together with
//! whatever the backward rule needs. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. Batched kernels are parallel over the
//! batch axis; every reduction runs in a fixed order, so results are
//! bit-identical regardless of thread scheduling.

use rayon::prelude::*;

use super::tensor::{cst, inverse_permutation, Scalar, Tensor};
use super::NnError;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= kernel && self.stride > 0).then(|| (padded - kernel) / self.stride + 1)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Scale(Var, T),
    AddSuffix(Var, Var),
    ChannelBias(Var, Var),
    Silu(Var),
    Conv1d { x: Var, w: Var, spec: ConvSpec },
    Linear { x: Var, w: Var },
    Bmm(Var, Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    PadLast { x: Var, len: usize },
    SliceLast { x: Var, len: usize },
    ConcatChannels(Var, Var),
    MeanLast(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
    /// Scalar loss whose gradient with respect to `x` was computed in the forward pass.
    Loss { x: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(msg: impl Into<String>) -> NnError {
    NnError::ShapeMismatch(msg.into())
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (parameters, inputs under test).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(format!("add {:?} + {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (broadcast over leading axes).
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var, NnError> {
        let (vx, vy) = (self.value(x), self.value(y));
        if !vx.shape().ends_with(vy.shape()) {
            return Err(mismatch(format!(
                "cannot broadcast {:?} onto {:?}",
                vy.shape(),
                vx.shape()
            )));
        }
        let n = vy.numel();
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(vy.data()).map(|(a, b)| *a + *b))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddSuffix(x, y), &[x, y]))
    }

    /// Per-channel bias for a `[B, C, N]` feature map.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (vx, vb) = (self.value(x), self.value(b));
        let s = vx.shape();
        if s.len() != 3 || vb.shape() != [s[1]] {
            return Err(mismatch(format!("channel bias {:?} for {:?}", vb.shape(), s)));
        }
        let (c, n) = (s[1], s[2]);
        let mut data = vx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = *v + vb.data()[(i / n) % c];
        }
        let out = Tensor::new(s.to_vec(), data)?;
        Ok(self.push(out, Op::ChannelBias(x, b), &[x, b]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Grouped 1D cross-correlation. `x: [B, Cin, N]`, `w: [Cout, Cin/groups, K]`.
    pub fn conv1d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var, NnError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let out = conv1d_forward(vx, vw, spec)?;
        Ok(self.push(out, Op::Conv1d { x, w, spec }, &[x, w]))
    }

    /// `x: [..., Din] @ w: [Din, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (vx, vw) = (self.value(x), self.value(w));
        let ws = vw.shape();
        let xs = vx.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(mismatch(format!("linear {xs:?} @ {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = vx.numel() / din;
        let data = matmul(vx.data(), vw.data(), rows, din, dout);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = dout;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    /// Batched matrix product `[G, M, K] @ [G, K, N]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch(format!("bmm {sa:?} @ {sb:?}")));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![T::zero(); g * m * n];
        data.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(i, out)| {
                let r = matmul(&va.data()[i * m * k..(i + 1) * m * k], &vb.data()[i * k * n..(i + 1) * k * n], m, k, n);
                out.copy_from_slice(&r);
            });
        let out = Tensor::new([g, m, n], data)?;
        Ok(self.push(out, Op::Bmm(a, b), &[a, b]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *vx.shape().last().unwrap();
        if vg.shape() != [d] || vb.shape() != [d] {
            return Err(mismatch(format!(
                "layer norm params {:?}/{:?} for {:?}",
                vg.shape(),
                vb.shape(),
                vx.shape()
            )));
        }
        let dn = cst::<T>(d as f64);
        let eps = cst::<T>(eps);
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).permute(perm)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NnError> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Right-pad the last axis with zeros up to `len`.
    pub fn pad_last(&mut self, x: Var, len: usize) -> Result<Var, NnError> {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        if len < n {
            return Err(mismatch(format!("pad {n} to shorter length {len}")));
        }
        let mut data = Vec::with_capacity(vx.numel() / n * len);
        for row in vx.data().chunks(n) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(T::zero(), len - n));
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::PadLast { x, len: n }, &[x]))
    }

    /// Keep the first `len` entries of the last axis.
    pub fn slice_last(&mut self, x: Var, len: usize) -> Result<Var, NnError> {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        if len > n {
            return Err(mismatch(format!("slice {len} from length {n}")));
        }
        let data = vx.data().chunks(n).flat_map(|r| r[..len].iter().copied()).collect();
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceLast { x, len: n }, &[x]))
    }

    /// Concatenate two `[B, C, N]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(mismatch(format!("concat {sa:?} with {sb:?}")));
        }
        let (ca, cb, n) = (sa[1] * sa[2], sb[1] * sb[2], sa[2]);
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for i in 0..sa[0] {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::new([sa[0], sa[1] + sb[1], n], data)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Mean over the last axis (global average pooling for `[B, C, N]`).
    pub fn mean_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let nn = cst::<T>(n as f64);
        let data = vx.data().chunks(n).map(|r| r.iter().copied().sum::<T>() / nn).collect();
        let shape = vx.shape()[..vx.shape().len() - 1].to_vec();
        let out = Tensor::new(shape, data).expect("reduced shape");
        self.push(out, Op::MeanLast(x), &[x])
    }

    /// Divide every row of the last axis by its Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let mut norms = Vec::with_capacity(vx.numel() / d);
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(cst(1e-12));
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Scalar `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var, NnError> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(mismatch(format!(
                "weights {:?} for {:?}",
                weights.shape(),
                vx.shape()
            )));
        }
        let s = vx.data().iter().zip(weights.data()).map(|(a, b)| *a * *b).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let w = Tensor::full(self.shape(x).to_vec(), T::one());
        self.weighted_sum(x, &w).expect("same shape")
    }

    /// Attach a scalar loss whose gradient with respect to `x` is already known.
    pub fn loss(&mut self, x: Var, value: T, grad: Tensor<T>) -> Result<Var, NnError> {
        if grad.shape() != self.shape(x) {
            return Err(mismatch(format!(
                "loss gradient {:?} for {:?}",
                grad.shape(),
                self.shape(x)
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Loss { x, grad }, &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(mismatch(format!(
                "cross entropy on {s:?} with {} labels",
                labels.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        let bn = cst::<T>(b as f64);
        let mut grad = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, row) in v.data().chunks(c).enumerate() {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total = total + lse - row[labels[i]];
            for j in 0..c {
                grad[i * c + j] = (row[j] - lse).exp() / bn;
            }
            grad[i * c + labels[i]] = grad[i * c + labels[i]] - T::one() / bn;
        }
        let grad = Tensor::new([b, c], grad)?;
        self.loss(logits, total / bn, grad)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NnError> {
        if self.value(root).numel() != 1 {
            return Err(mismatch(format!(
                "backward needs a scalar, got {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop(
        &self,
        node: &Node<T>,
        gy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), NnError> {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Scale(x, f) => acc(*x, gy.map(|g| g * *f)),
            Op::AddSuffix(x, y) => {
                acc(*x, gy.clone());
                let n = val(*y).numel();
                let mut gyy = vec![T::zero(); n];
                for row in gy.data().chunks(n) {
                    for (o, g) in gyy.iter_mut().zip(row) {
                        *o = *o + *g;
                    }
                }
                acc(*y, Tensor::new(val(*y).shape().to_vec(), gyy)?);
            }
            Op::ChannelBias(x, b) => {
                acc(*x, gy.clone());
                let s = gy.shape();
                let (c, n) = (s[1], s[2]);
                let mut gb = vec![T::zero(); c];
                for (i, row) in gy.data().chunks(n).enumerate() {
                    gb[i % c] = gb[i % c] + row.iter().copied().sum::<T>();
                }
                acc(*b, Tensor::new([c], gb)?);
            }
            Op::Silu(x) => {
                let vx = val(*x);
                let data = vx
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(*x, Tensor::new(vx.shape().to_vec(), data)?);
            }
            Op::Conv1d { x, w, spec } => {
                let need = (self.nodes[x.0].needs_grad, self.nodes[w.0].needs_grad);
                let (gx, gw) = conv1d_backward(val(*x), val(*w), gy, *spec, need);
                if let Some(g) = gx {
                    acc(*x, g);
                }
                if let Some(g) = gw {
                    acc(*w, g);
                }
            }
            Op::Linear { x, w } => {
                let (vx, vw) = (val(*x), val(*w));
                let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / din;
                if self.nodes[x.0].needs_grad {
                    let wt = transpose(vw.data(), din, dout);
                    let gx = matmul(gy.data(), &wt, rows, dout, din);
                    acc(*x, Tensor::new(vx.shape().to_vec(), gx)?);
                }
                if self.nodes[w.0].needs_grad {
                    let xt = transpose(vx.data(), rows, din);
                    let gw = matmul(&xt, gy.data(), din, rows, dout);
                    acc(*w, Tensor::new([din, dout], gw)?);
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (g, m, k, n) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                let mut ga = vec![T::zero(); g * m * k];
                let mut gb = vec![T::zero(); g * k * n];
                ga.par_chunks_mut(m * k)
                    .zip(gb.par_chunks_mut(k * n))
                    .enumerate()
                    .for_each(|(i, (ga, gb))| {
                        let dy = &gy.data()[i * m * n..(i + 1) * m * n];
                        let ai = &va.data()[i * m * k..(i + 1) * m * k];
                        let bi = &vb.data()[i * k * n..(i + 1) * k * n];
                        ga.copy_from_slice(&matmul(dy, &transpose(bi, k, n), m, n, k));
                        gb.copy_from_slice(&matmul(&transpose(ai, m, k), dy, k, m, n));
                    });
                acc(*a, Tensor::new([g, m, k], ga)?);
                acc(*b, Tensor::new([g, k, n], gb)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(gy.data().chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = val(*gamma);
                let d = vg.numel();
                let dn = cst::<T>(d as f64);
                let mut gg = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gx = vec![T::zero(); xhat.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gyr = &gy.data()[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        gg[j] = gg[j] + gyr[j] * xh[j];
                        gbeta[j] = gbeta[j] + gyr[j];
                        let dxh = gyr[j] * vg.data()[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                    }
                    for j in 0..d {
                        let dxh = gyr[j] * vg.data()[j];
                        gx[r * d + j] = rs / dn * (dn * dxh - sum_dxh - xh[j] * sum_dxh_xh);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), gx)?);
                acc(*gamma, Tensor::new([d], gg)?);
                acc(*beta, Tensor::new([d], gbeta)?);
            }
            Op::Permute(x, perm) => acc(*x, gy.permute(&inverse_permutation(perm))?),
            Op::Reshape(x) => acc(*x, gy.clone().reshape(val(*x).shape().to_vec())?),
            Op::PadLast { x, len } => {
                let n = *gy.shape().last().unwrap();
                let data = gy.data().chunks(n).flat_map(|r| r[..*len].iter().copied()).collect();
                acc(*x, Tensor::new(val(*x).shape().to_vec(), data)?);
            }
            Op::SliceLast { x, len } => {
                let n = *gy.shape().last().unwrap();
                let mut data = Vec::with_capacity(val(*x).numel());
                for row in gy.data().chunks(n) {
                    data.extend_from_slice(row);
                    data.extend(std::iter::repeat_n(T::zero(), len - n));
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), data)?);
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                let (ca, cb) = (sa[1] * sa[2], sb[1] * sb[2]);
                let mut ga = Vec::with_capacity(sa.iter().product());
                let mut gb = Vec::with_capacity(sb.iter().product());
                for chunk in gy.data().chunks(ca + cb) {
                    ga.extend_from_slice(&chunk[..ca]);
                    gb.extend_from_slice(&chunk[ca..]);
                }
                acc(*a, Tensor::new(sa, ga)?);
                acc(*b, Tensor::new(sb, gb)?);
            }
            Op::MeanLast(x) => {
                let vx = val(*x);
                let n = *vx.shape().last().unwrap();
                let nn = cst::<T>(n as f64);
                let data = gy
                    .data()
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / nn, n))
                    .collect();
                acc(*x, Tensor::new(vx.shape().to_vec(), data)?);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut gx = Vec::with_capacity(y.numel());
                for ((yr, gr), &n) in y.data().chunks(d).zip(gy.data().chunks(d)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::WeightedSum { x, weights } => {
                let g = gy.data()[0];
                let data = weights.iter().map(|&w| w * g).collect();
                acc(*x, Tensor::new(val(*x).shape().to_vec(), data)?);
            }
            Op::Loss { x, grad } => {
                let g = gy.data()[0];
                acc(*x, grad.map(|v| v * g));
            }
        }
        Ok(())
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-major `[m, k] @ [k, n]`; rows are computed in parallel.
fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov = *ov + av * bv;
            }
        }
    };
    if n == 0 {
        return out;
    }
    if m * k * n > 1 << 15 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

struct ConvDims {
    b: usize,
    cin: usize,
    n: usize,
    cout: usize,
    cin_g: usize,
    k: usize,
    out_len: usize,
    cout_g: usize,
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<ConvDims, NnError> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 3 || ws.len() != 3 || spec.groups == 0 {
        return Err(mismatch(format!("conv1d input {xs:?} weight {ws:?}")));
    }
    let (b, cin, n) = (xs[0], xs[1], xs[2]);
    let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
    if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
        return Err(mismatch(format!(
            "conv1d input {xs:?} weight {ws:?} groups {}",
            spec.groups
        )));
    }
    let out_len = spec
        .output_len(n, k)
        .ok_or_else(|| mismatch(format!("conv1d kernel {k} longer than padded input {n}")))?;
    Ok(ConvDims {
        b,
        cin,
        n,
        cout,
        cin_g,
        k,
        out_len,
        cout_g: cout / spec.groups,
    })
}

/// 1x1 convolution without stride, padding or groups: a plain matmul per sample.
fn pointwise(d: &ConvDims, spec: ConvSpec) -> bool {
    d.k == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1
}

/// Valid output positions `t` for kernel tap `kk`: those with
/// `0 <= t*stride + kk - pad < n`.
#[inline]
fn tap_range(kk: usize, spec: ConvSpec, n: usize, out_len: usize) -> (usize, usize) {
    let s = spec.stride;
    let lo = if kk >= spec.padding {
        0
    } else {
        (spec.padding - kk).div_ceil(s)
    };
    // t*s + kk - pad <= n - 1  =>  t <= (n - 1 + pad - kk) / s
    let hi = if n + spec.padding > kk {
        ((n - 1 + spec.padding - kk) / s + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>, NnError> {
    let d = conv_dims(x, w, spec)?;
    let mut out = vec![T::zero(); d.b * d.cout * d.out_len];
    let (xd, wd) = (x.data(), w.data());
    if pointwise(&d, spec) {
        out.par_chunks_mut(d.cout * d.n)
            .zip(xd.par_chunks(d.cin * d.n))
            .for_each(|(ob, xb)| ob.copy_from_slice(&matmul(wd, xb, d.cout, d.cin, d.n)));
        return Tensor::new([d.b, d.cout, d.out_len], out);
    }
    out.par_chunks_mut(d.cout * d.out_len)
        .enumerate()
        .for_each(|(bi, ob)| {
            for o in 0..d.cout {
                let g = o / d.cout_g;
                let orow = &mut ob[o * d.out_len..(o + 1) * d.out_len];
                for c in 0..d.cin_g {
                    let ci = g * d.cin_g + c;
                    let xrow = &xd[(bi * d.cin + ci) * d.n..(bi * d.cin + ci + 1) * d.n];
                    for kk in 0..d.k {
                        let wv = wd[(o * d.cin_g + c) * d.k + kk];
                        let (lo, hi) = tap_range(kk, spec, d.n, d.out_len);
                        if lo == hi {
                            continue;
                        }
                        let start = lo * spec.stride + kk - spec.padding;
                        if spec.stride == 1 {
                            let src = &xrow[start..start + hi - lo];
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(src) {
                                *ov = *ov + wv * xv;
                            }
                            continue;
                        }
                        let src = xrow[start..].iter().step_by(spec.stride);
                        for (ov, &xv) in orow[lo..hi].iter_mut().zip(src) {
                            *ov = *ov + wv * xv;
                        }
                    }
                }
            }
        });
    Tensor::new([d.b, d.cout, d.out_len], out)
}

fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    spec: ConvSpec,
    (need_x, need_w): (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = conv_dims(x, w, spec).expect("validated in forward");
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    if pointwise(&d, spec) {
        let gx = need_x.then(|| {
            let wt = transpose(wd, d.cout, d.cin);
            let mut gx = vec![T::zero(); d.b * d.cin * d.n];
            gx.par_chunks_mut(d.cin * d.n)
                .zip(gd.par_chunks(d.cout * d.n))
                .for_each(|(gxb, gb)| gxb.copy_from_slice(&matmul(&wt, gb, d.cin, d.cout, d.n)));
            Tensor::new(x.shape().to_vec(), gx).expect("input shape")
        });
        let gw = need_w.then(|| {
            let mut gw = vec![T::zero(); d.cout * d.cin];
            for (xb, gb) in xd.chunks(d.cin * d.n).zip(gd.chunks(d.cout * d.n)) {
                let xt = transpose(xb, d.cin, d.n);
                for (a, v) in gw.iter_mut().zip(matmul(gb, &xt, d.cout, d.n, d.cin)) {
                    *a = *a + v;
                }
            }
            Tensor::new(w.shape().to_vec(), gw).expect("weight shape")
        });
        return (gx, gw);
    }
    let gx = need_x.then(|| conv_grad_input(&d, wd, gd, spec, x.shape()));
    let gw = need_w.then(|| conv_grad_weight(&d, xd, gd, spec, w.shape()));
    (gx, gw)
}

fn conv_grad_input<T: Scalar>(
    d: &ConvDims,
    wd: &[T],
    gd: &[T],
    spec: ConvSpec,
    shape: &[usize],
) -> Tensor<T> {
    let mut gx = vec![T::zero(); d.b * d.cin * d.n];
    gx.par_chunks_mut(d.cin * d.n)
        .enumerate()
        .for_each(|(bi, gxb)| {
            for o in 0..d.cout {
                let g = o / d.cout_g;
                let grow = &gd[(bi * d.cout + o) * d.out_len..(bi * d.cout + o + 1) * d.out_len];
                for c in 0..d.cin_g {
                    let ci = g * d.cin_g + c;
                    let gxr = &mut gxb[ci * d.n..(ci + 1) * d.n];
                    for kk in 0..d.k {
                        let wv = wd[(o * d.cin_g + c) * d.k + kk];
                        let (lo, hi) = tap_range(kk, spec, d.n, d.out_len);
                        if lo == hi {
                            continue;
                        }
                        let start = lo * spec.stride + kk - spec.padding;
                        if spec.stride == 1 {
                            let dst = &mut gxr[start..start + hi - lo];
                            for (gv, &g) in dst.iter_mut().zip(&grow[lo..hi]) {
                                *gv = *gv + wv * g;
                            }
                            continue;
                        }
                        let dst = gxr[start..].iter_mut().step_by(spec.stride);
                        for (gv, &g) in dst.zip(&grow[lo..hi]) {
                            *gv = *gv + wv * g;
                        }
                    }
                }
            }
        });
    Tensor::new(shape.to_vec(), gx).expect("input shape")
}

fn conv_grad_weight<T: Scalar>(
    d: &ConvDims,
    xd: &[T],
    gd: &[T],
    spec: ConvSpec,
    shape: &[usize],
) -> Tensor<T> {
    let mut gw = vec![T::zero(); d.cout * d.cin_g * d.k];
    gw.par_chunks_mut(d.cin_g * d.k)
        .enumerate()
        .for_each(|(o, gwo)| {
            let g = o / d.cout_g;
            for bi in 0..d.b {
                let grow = &gd[(bi * d.cout + o) * d.out_len..(bi * d.cout + o + 1) * d.out_len];
                for c in 0..d.cin_g {
                    let ci = g * d.cin_g + c;
                    let xrow = &xd[(bi * d.cin + ci) * d.n..(bi * d.cin + ci + 1) * d.n];
                    for kk in 0..d.k {
                        let (lo, hi) = tap_range(kk, spec, d.n, d.out_len);
                        if lo == hi {
                            continue;
                        }
                        let start = lo * spec.stride + kk - spec.padding;
                        let mut s = T::zero();
                        if spec.stride == 1 {
                            for (&g, &xv) in grow[lo..hi].iter().zip(&xrow[start..start + hi - lo]) {
                                s = s + g * xv;
                            }
                        } else {
                            let src = xrow[start..].iter().step_by(spec.stride);
                            for (&g, &xv) in grow[lo..hi].iter().zip(src) {
                                s = s + g * xv;
                            }
                        }
                        gwo[c * d.k + kk] = gwo[c * d.k + kk] + s;
                    }
                }
            }
        });
    Tensor::new(shape.to_vec(), gw).expect("weight shape")
}

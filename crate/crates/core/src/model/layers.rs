//! Building blocks of the network, expressed as graph operations.
//!
//! Every layer looks up its parameters in a [`Bound`] by name, so the same
//! code runs on `f32` for training and `f64` for gradient checks.

use crate::nn::{cst, ConvSpec, Graph, Scalar, Tensor, Var};

use super::{Activation, Bound, ModelError};

pub fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Silu => g.silu(x),
        Activation::Identity => x,
    }
}

/// Convolution `name.weight` with optional `name.bias`, "same" padding.
pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    groups: usize,
) -> Result<Var, ModelError> {
    let w = p.get(&format!("{name}.weight"))?;
    let k = g.shape(w)[2];
    let y = g.conv1d(x, w, ConvSpec::new(stride, k / 2, groups))?;
    match p.try_get(&format!("{name}.bias")) {
        Some(b) => Ok(g.channel_bias(y, b)?),
        None => Ok(y),
    }
}

/// `x @ name.weight + name.bias` over the last axis.
pub fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let y = g.linear(x, p.get(&format!("{name}.weight"))?)?;
    Ok(g.add_suffix(y, p.get(&format!("{name}.bias"))?)?)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta, 1e-5)?)
}

/// Inverted residual: 1x1 expand, depthwise conv with `stride`, 1x1 project;
/// identity skip when the shape is preserved.
pub fn mv2_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
    act: Activation,
) -> Result<Var, ModelError> {
    let cin = g.shape(x)[1];
    let h = conv(g, p, &format!("{prefix}.expand"), x, 1, 1)?;
    let h = activate(g, h, act);
    let hidden = g.shape(h)[1];
    let h = conv(g, p, &format!("{prefix}.depthwise"), h, stride, hidden)?;
    let h = activate(g, h, act);
    let y = conv(g, p, &format!("{prefix}.project"), h, 1, 1)?;
    if stride == 1 && g.shape(y)[1] == cin {
        Ok(g.add(x, y)?)
    } else {
        Ok(y)
    }
}

/// `[B, C, N]` to `[B*p, N/p, C]`: position `i` of patch `j` becomes token
/// `j` of stream `i`. Requires `p | N`.
pub fn unfold_1d<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<Tensor<T>, ModelError> {
    let [b, c, n] = dims3(x.shape())?;
    if p == 0 || n % p != 0 {
        return Err(ModelError::IndivisibleLength { len: n, patch: p });
    }
    let t = n / p;
    let y = x.clone().reshape([b, c, t, p])?.permute(&[0, 3, 2, 1])?;
    Ok(y.reshape([b * p, t, c])?)
}

/// Inverse of [`unfold_1d`].
pub fn fold_1d<T: Scalar>(tokens: &Tensor<T>, p: usize) -> Result<Tensor<T>, ModelError> {
    let [bp, t, c] = dims3(tokens.shape())?;
    if p == 0 || bp % p != 0 {
        return Err(ModelError::Nn(crate::nn::NnError::ShapeMismatch(format!(
            "{bp} token streams are not a multiple of patch size {p}"
        ))));
    }
    let y = tokens.clone().reshape([bp / p, p, t, c])?.permute(&[0, 3, 2, 1])?;
    Ok(y.reshape([bp / p, c, t * p])?)
}

fn dims3(s: &[usize]) -> Result<[usize; 3], ModelError> {
    <[usize; 3]>::try_from(s).map_err(|_| {
        ModelError::Nn(crate::nn::NnError::ShapeMismatch(format!("expected rank 3, got {s:?}")))
    })
}

/// Graph version of [`unfold_1d`]; right-pads `N` with zeros to a multiple of `p`.
pub fn unfold_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var, ModelError> {
    let [b, c, n] = dims3(g.shape(x))?;
    let padded = n.div_ceil(p) * p;
    let x = if padded == n { x } else { g.pad_last(x, padded)? };
    let t = padded / p;
    let y = g.reshape(x, &[b, c, t, p])?;
    let y = g.permute(y, &[0, 3, 2, 1])?;
    Ok(g.reshape(y, &[b * p, t, c])?)
}

/// Graph version of [`fold_1d`]; truncates back to length `n`.
pub fn fold_tokens<T: Scalar>(g: &mut Graph<T>, tokens: Var, p: usize, n: usize) -> Result<Var, ModelError> {
    let [bp, t, c] = dims3(g.shape(tokens))?;
    let y = g.reshape(tokens, &[bp / p, p, t, c])?;
    let y = g.permute(y, &[0, 3, 2, 1])?;
    let y = g.reshape(y, &[bp / p, c, t * p])?;
    if t * p == n {
        Ok(y)
    } else {
        Ok(g.slice_last(y, n)?)
    }
}

/// Output of one transformer layer together with its attention weights
/// `[streams * heads, T, T]`.
pub struct Attended {
    pub output: Var,
    pub attention: Var,
}

/// Pre-norm multi-head self-attention and feed-forward, both residual.
/// `x: [G, T, D]`; attention runs within each of the `G` streams.
pub fn transformer_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    act: Activation,
) -> Result<Attended, ModelError> {
    let [gs, t, d] = dims3(g.shape(x))?;
    if d % heads != 0 {
        return Err(ModelError::InvalidConfig(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let h = layer_norm(g, p, &format!("{prefix}.norm1"), x)?;
    let mut split = |name: &str, perm: &[usize], shape: [usize; 3]| -> Result<Var, ModelError> {
        let v = linear(g, p, &format!("{prefix}.{name}"), h)?;
        let v = g.reshape(v, &[gs, t, heads, dh])?;
        let v = g.permute(v, perm)?;
        Ok(g.reshape(v, &shape)?)
    };
    let q = split("query", &[0, 2, 1, 3], [gs * heads, t, dh])?;
    let kt = split("key", &[0, 2, 3, 1], [gs * heads, dh, t])?;
    let v = split("value", &[0, 2, 1, 3], [gs * heads, t, dh])?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, cst::<T>(1.0 / (dh as f64).sqrt()));
    let attention = g.softmax(scores);
    let o = g.bmm(attention, v)?;
    let o = g.reshape(o, &[gs, heads, t, dh])?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[gs, t, d])?;
    let o = linear(g, p, &format!("{prefix}.out"), o)?;
    let x = g.add(x, o)?;

    let h = layer_norm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, p, &format!("{prefix}.ffn1"), h)?;
    let h = activate(g, h, act);
    let h = linear(g, p, &format!("{prefix}.ffn2"), h)?;
    let output = g.add(x, h)?;
    Ok(Attended { output, attention })
}

/// Add the learned per-token encoding `[T, D]` to `[G, T, D]` tokens.
pub fn positional_encoding<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, tokens: Var) -> Result<Var, ModelError> {
    Ok(g.add_suffix(tokens, p.get(name)?)?)
}

/// Local conv, project to tokens, unfold, encode positions, transformers,
/// fold, project back, concatenate with the input and fuse.
#[allow(clippy::too_many_arguments)]
pub fn mobilevit_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    depth: usize,
    heads: usize,
    patch: usize,
    act: Activation,
) -> Result<Var, ModelError> {
    let n = g.shape(x)[2];
    let h = conv(g, p, &format!("{prefix}.local"), x, 1, 1)?;
    let h = activate(g, h, act);
    let h = conv(g, p, &format!("{prefix}.to_tokens"), h, 1, 1)?;
    let tokens = unfold_tokens(g, h, patch)?;
    let mut tokens = positional_encoding(g, p, &format!("{prefix}.pos"), tokens)?;
    for layer in 0..depth {
        tokens = transformer_block(g, p, &format!("{prefix}.layers.{layer}"), tokens, heads, act)?.output;
    }
    let tokens = layer_norm(g, p, &format!("{prefix}.norm"), tokens)?;
    let h = fold_tokens(g, tokens, patch, n)?;
    let h = conv(g, p, &format!("{prefix}.from_tokens"), h, 1, 1)?;
    let h = activate(g, h, act);
    let h = g.concat_channels(x, h)?;
    let y = conv(g, p, &format!("{prefix}.fuse"), h, 1, 1)?;
    Ok(activate(g, y, act))
}

//! Attention blocks: scaled dot-product, dynamic scaling, and the residual
//! integrated form, plus the importance profile read off attention weights.
//!
//! Queries, keys and values are always the input itself (self-attention with
//! no learned projections), so every block takes a single `[B, T, D]` node
//! and a choice of which axis plays the token role.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Which axis of a `[batch, time, feature]` tensor acts as the token axis.
///
/// `Time` attends across the window's steps (tokens = L, d_k = feature
/// width); `Feature` attends across channels (tokens = F, d_k = window
/// length), which is what makes per-feature importance readable directly
/// from the weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    Time,
    Feature,
}

/// The learnable scalar multiplier applied to pre-softmax scores.
#[derive(Debug, Clone)]
pub struct DynamicScale {
    pub value: Tensor,
}

impl DynamicScale {
    /// A fresh scale initialized so the block starts out as plain scaled
    /// dot-product attention.
    pub fn new(initial: f64) -> Result<Self> {
        if !initial.is_finite() {
            return Err(Error::Parameter(format!("dynamic scale {initial} is not finite")));
        }
        Ok(DynamicScale {
            value: Tensor::scalar(initial)?.with_requires_grad(),
        })
    }
}

impl Default for DynamicScale {
    fn default() -> Self {
        DynamicScale::new(1.0).expect("1.0 is finite")
    }
}

/// Attended values plus the row-stochastic weight matrix that produced them.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Same shape as the value input.
    pub attended: NodeId,
    /// `[batch, tokens, tokens]`; each row sums to 1.
    pub weights: NodeId,
}

fn check_qkv(g: &Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<(usize, usize, usize)> {
    let qs = g.shape(q);
    if qs.len() != 3 {
        return Err(Error::dim("attention", format!("expected [B, T, D], got {qs:?}")));
    }
    for other in [k, v] {
        if g.shape(other) != qs {
            return Err(Error::dim_pair("attention", qs, g.shape(other)));
        }
    }
    Ok((qs[0], qs[1], qs[2]))
}

/// `A = softmax(QKᵀ/√d_k)`, `Z = A·V`.
pub fn scaled_dot_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId) -> Result<AttentionOutput> {
    let (_, _, d) = check_qkv(g, q, k, v)?;
    let kt = g.transpose_last_two(k)?;
    let raw = g.matmul(q, kt)?;
    let scores = g.scale(raw, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(scores, 2)?;
    let attended = g.matmul(weights, v)?;
    Ok(AttentionOutput { attended, weights })
}

/// As [`scaled_dot_attention`] with the scores multiplied by the learnable
/// scale before the softmax; gradients flow to `lambda`.
pub fn dynamic_attention(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, lambda: NodeId) -> Result<AttentionOutput> {
    let (_, _, d) = check_qkv(g, q, k, v)?;
    if g.data(lambda).len() != 1 {
        return Err(Error::dim(
            "dynamic_attention",
            format!("lambda must be a scalar, got shape {:?}", g.shape(lambda)),
        ));
    }
    let kt = g.transpose_last_two(k)?;
    let raw = g.matmul(q, kt)?;
    let scaled = g.scale(raw, 1.0 / (d as f64).sqrt())?;
    let scores = g.mul(scaled, lambda)?;
    let weights = g.softmax(scores, 2)?;
    let attended = g.matmul(weights, v)?;
    Ok(AttentionOutput { attended, weights })
}

/// Residual dynamic self-attention: `y = x + Z_dynamic(x, x, x)`.
///
/// `x` must be `[batch, L, F]`. In `Feature` mode the token view is the
/// transposed `[batch, F, L]` layout and the result is transposed back, so
/// `y` always has exactly `x`'s shape. Returns `(y, weights)` with weights
/// shaped `[batch, tokens, tokens]`.
pub fn iam_forward(g: &mut Graph, x: NodeId, axis: AttentionAxis, lambda: NodeId) -> Result<(NodeId, NodeId)> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(Error::dim("iam_forward", format!("expected [B, L, F], got {xs:?}")));
    }
    match axis {
        AttentionAxis::Time => {
            let out = dynamic_attention(g, x, x, x, lambda)?;
            let y = g.add(x, out.attended)?;
            Ok((y, out.weights))
        }
        AttentionAxis::Feature => {
            let xt = g.transpose_last_two(x)?;
            let out = dynamic_attention(g, xt, xt, xt, lambda)?;
            let yt = g.add(xt, out.attended)?;
            let y = g.transpose_last_two(yt)?;
            Ok((y, out.weights))
        }
    }
}

/// Column mass of a `[B, T, T]` weight tensor: how much attention each token
/// receives, averaged over the batch and the query rows. Sums to 1.
pub fn importance_profile(weights: &Tensor) -> Result<Vec<f64>> {
    let per = importance_profile_per_window(weights)?;
    let t = per[0].len();
    let mut out = vec![0.0; t];
    for row in &per {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let b = per.len() as f64;
    for o in &mut out {
        *o /= b;
    }
    Ok(out)
}

/// Per-batch-element column means of a `[B, T, T]` weight tensor.
pub fn importance_profile_per_window(weights: &Tensor) -> Result<Vec<Vec<f64>>> {
    let sh = weights.shape();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::dim(
            "importance_profile",
            format!("expected [B, T, T] attention weights, got {sh:?}"),
        ));
    }
    let (b, t) = (sh[0], sh[1]);
    let data = weights.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut profile = vec![0.0; t];
        for row in 0..t {
            let base = (bi * t + row) * t;
            for (p, &w) in profile.iter_mut().zip(&data[base..base + t]) {
                *p += w;
            }
        }
        for p in &mut profile {
            *p /= t as f64;
        }
        out.push(profile);
    }
    Ok(out)
}

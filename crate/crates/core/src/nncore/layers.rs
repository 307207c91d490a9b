//! Composite layers built from graph primitives.

use super::graph::{log_sum_exp, Graph, NodeId};
use super::tensor::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// `y = x W + b` for parameters stored as `{prefix}.weight` / `{prefix}.bias`.
pub fn linear<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

pub fn layer_norm<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    prefix: &str,
    x: NodeId,
    eps: T,
) -> Result<NodeId> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

/// Full self-attention over each `seq_len` block of rows: packed QKV
/// projection, per-head scaled dot-product attention, output projection.
pub fn multi_head_attention<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    store: &'a ParamStore<T>,
    prefix: &str,
    x: NodeId,
    heads: usize,
    seq_len: usize,
) -> Result<NodeId> {
    let h = g.dims(x).1;
    if heads == 0 || h % heads != 0 {
        return Err(Error::Config(format!("hidden size {h} not divisible by {heads} heads")));
    }
    let qkv = linear(g, store, &format!("{prefix}.qkv"), x)?;
    let mixed = g.attention(qkv, heads, seq_len)?;
    linear(g, store, &format!("{prefix}.proj"), mixed)
}

/// Cross-entropy of one logit vector and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Index(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let mut grad: Vec<T> = logits.iter().map(|v| (*v - lse).exp()).collect();
    grad[label] = grad[label] - T::one();
    Ok((lse - logits[label], grad))
}

pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| (*v - lse).exp()).collect()
}

//! Shared layers built from graph primitives: dense maps, affine layer norm
//! and pre-norm transformer blocks with optional prefix keys/values.

use rand::Rng;

use crate::grad::{multi_head_attention, GradError, Mask, NodeId, ParamStore, Scope, Tensor};

pub const LN_EPS: f64 = 1e-5;

pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut R,
) {
    let std = gain / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

/// `x·W + b` for `x` of shape `[n, fan_in]`.
pub fn dense(s: &mut Scope, name: &str, x: NodeId) -> Result<NodeId, GradError> {
    let w = s.p(&format!("{name}.w"))?;
    let b = s.p(&format!("{name}.b"))?;
    let y = s.graph.matmul(x, w)?;
    s.graph.add(y, b)
}

pub fn init_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

pub fn norm(s: &mut Scope, name: &str, x: NodeId) -> Result<NodeId, GradError> {
    let g = s.p(&format!("{name}.g"))?;
    let b = s.p(&format!("{name}.b"))?;
    let y = s.graph.layer_norm(x, LN_EPS);
    let y = s.graph.mul(y, g)?;
    s.graph.add(y, b)
}

pub fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, mlp: usize, rng: &mut R) {
    init_norm(store, &format!("{name}.ln1"), d);
    for p in ["q", "k", "v"] {
        init_dense(store, &format!("{name}.{p}"), d, d, 1.0, rng);
    }
    init_dense(store, &format!("{name}.o"), d, d, 0.5, rng);
    init_norm(store, &format!("{name}.ln2"), d);
    init_dense(store, &format!("{name}.fc1"), d, mlp, 1.0, rng);
    init_dense(store, &format!("{name}.fc2"), mlp, d, 0.5, rng);
}

/// Block output plus the keys/values computed for this block's own tokens.
pub struct BlockOut {
    pub out: NodeId,
    pub k: NodeId,
    pub v: NodeId,
}

/// Pre-norm self-attention block. Queries come from `x`; keys and values are
/// `prefix ‖ own`, and `mask` is `rows(x) × (rows(prefix) + rows(x))`.
pub fn block(
    s: &mut Scope,
    name: &str,
    x: NodeId,
    heads: usize,
    prefix: Option<(NodeId, NodeId)>,
    mask: &Mask,
) -> Result<BlockOut, GradError> {
    let h = norm(s, &format!("{name}.ln1"), x)?;
    let q = dense(s, &format!("{name}.q"), h)?;
    let k = dense(s, &format!("{name}.k"), h)?;
    let v = dense(s, &format!("{name}.v"), h)?;
    let (kk, vv) = match prefix {
        Some((pk, pv)) if s.graph.shape(pk)[0] > 0 => {
            (s.graph.concat(&[pk, k], 0)?, s.graph.concat(&[pv, v], 0)?)
        }
        _ => (k, v),
    };
    let a = multi_head_attention(&mut s.graph, q, kk, vv, heads, mask)?;
    let a = dense(s, &format!("{name}.o"), a)?;
    let x = s.graph.add(x, a)?;
    let out = mlp(s, name, x)?;
    Ok(BlockOut { out, k, v })
}

fn mlp(s: &mut Scope, name: &str, x: NodeId) -> Result<NodeId, GradError> {
    let h = norm(s, &format!("{name}.ln2"), x)?;
    let h = dense(s, &format!("{name}.fc1"), h)?;
    let h = s.graph.gelu(h);
    let h = dense(s, &format!("{name}.fc2"), h)?;
    s.graph.add(x, h)
}

/// Learned queries attending over `memory` (no mask), followed by an MLP.
pub fn cross_block(
    s: &mut Scope,
    name: &str,
    queries: NodeId,
    memory: NodeId,
    heads: usize,
) -> Result<NodeId, GradError> {
    let hq = norm(s, &format!("{name}.ln1"), queries)?;
    let hm = norm(s, &format!("{name}.lnm"), memory)?;
    let q = dense(s, &format!("{name}.q"), hq)?;
    let k = dense(s, &format!("{name}.k"), hm)?;
    let v = dense(s, &format!("{name}.v"), hm)?;
    let mask = Mask::full(s.graph.shape(q)[0], s.graph.shape(k)[0]);
    let a = multi_head_attention(&mut s.graph, q, k, v, heads, &mask)?;
    let a = dense(s, &format!("{name}.o"), a)?;
    let x = s.graph.add(queries, a)?;
    mlp(s, name, x)
}

pub fn init_cross_block<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, mlp: usize, rng: &mut R) {
    init_block(store, name, d, mlp, rng);
    init_norm(store, &format!("{name}.lnm"), d);
}

/// Row-wise argmax with lowest-index tie-break.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

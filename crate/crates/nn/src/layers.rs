//! Named-parameter layers built on the graph ops.
//!
//! Each layer reads its tensors from a [`ParamStore`] under a name prefix,
//! e.g. `audio.conv1.w`, and is initialized by the matching `init_*` on the
//! store.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::real::Real;

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x [B, in] · W [in, out] + b`.
pub fn dense<T: Real>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_by_name(ps, &format!("{prefix}.w"))?;
    let b = g.param_by_name(ps, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

pub fn conv1d<T: Real>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_by_name(ps, &format!("{prefix}.w"))?;
    let b = g.param_by_name(ps, &format!("{prefix}.b"))?;
    g.conv1d(x, w, b)
}

pub fn batch_norm<T: Real>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param_by_name(ps, &format!("{prefix}.gamma"))?;
    let beta = g.param_by_name(ps, &format!("{prefix}.beta"))?;
    let rm = ps.by_name(&format!("{prefix}.running_mean"))?.data();
    let rv = ps.by_name(&format!("{prefix}.running_var"))?.data();
    g.batch_norm(x, gamma, beta, rm, rv, T::from_f64(BATCH_NORM_EPS), prefix)
}

pub fn layer_norm<T: Real>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = g.param_by_name(ps, &format!("{prefix}.gamma"))?;
    let beta = g.param_by_name(ps, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, T::from_f64(LAYER_NORM_EPS))
}

/// Parameters of one multi-head attention block: per-head projections are
/// stored side by side as `[d, d]` matrices (`W^Q = [W_1^Q | ... | W_h^Q]`),
/// plus the output projection `W^O`.
pub fn init_mha<T: Real, R: Rng>(ps: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut R) {
    for p in ["wq", "wk", "wv", "wo"] {
        ps.init_projection(&format!("{prefix}.{p}"), d, d, rng);
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Node carrying the attention weights `[B, h, n_q, n_k]`.
    pub attn: Var,
}

/// Multi-head attention `MHA(Q, K, V)` over `[B, n, d]` sequences.
pub fn mha<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<AttentionOutput> {
    let sq = g.value(query).shape().to_vec();
    let sk = g.value(key).shape().to_vec();
    if sq.len() != 3 || sk.len() != 3 {
        return Err(crate::error::shape_err("mha", format!("q {sq:?}, k {sk:?}")));
    }
    let d = sq[2];
    if heads == 0 || d % heads != 0 {
        return Err(NnError::HeadsMismatch { d, h: heads });
    }
    let project = |g: &mut Graph<T>, x: Var, shape: &[usize], name: &str| -> Result<Var> {
        let w = g.param_by_name(ps, &format!("{prefix}.{name}"))?;
        let flat = g.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let y = g.matmul(flat, w)?;
        g.reshape(y, shape)
    };
    let q = project(g, query, &sq, "wq")?;
    let k = project(g, key, &sk, "wk")?;
    let v = project(g, value, &g.value(value).shape().to_vec(), "wv")?;
    let attn = g.attention(q, k, v, heads)?;
    let out = project(g, attn, &sq, "wo")?;
    Ok(AttentionOutput { out, attn })
}

pub fn init_ffn<T: Real, R: Rng>(ps: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize, rng: &mut R) {
    ps.init_dense(&format!("{prefix}.fc1"), d, d_ff, rng);
    ps.init_dense(&format!("{prefix}.fc2"), d_ff, d, rng);
}

/// Position-wise `ReLU(X W_1 + b_1) W_2 + b_2` on `[B, n, d]` or `[R, d]`.
pub fn ffn<T: Real>(g: &mut Graph<T>, ps: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let d = *shape.last().unwrap_or(&1);
    let rows = g.value(x).len() / d.max(1);
    let flat = g.reshape(x, &[rows, d])?;
    let h = dense(g, ps, &format!("{prefix}.fc1"), flat)?;
    let h = g.relu(h);
    let y = dense(g, ps, &format!("{prefix}.fc2"), h)?;
    g.reshape(y, &shape)
}
